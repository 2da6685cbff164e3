"""Masking vectors, binary masks and their plain-text file format."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pcmask.errors import FormatError, ShapeError


@dataclass(frozen=True)
class MaskVector:
    """Per-input signal strength: L2 norm of each input-kernel column."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ShapeError("mask vector must be a nonempty 1-d array")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("mask vector entries must be finite and nonnegative")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray
    threshold: float
    raw: np.ndarray | None = None

    def __post_init__(self):
        bits = np.asarray(self.bits).astype(np.uint8)
        if bits.ndim != 1:
            raise ShapeError("mask bits must be 1-d")
        if np.any(bits > 1):
            raise ValueError("mask bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)
        if self.raw is not None:
            raw = np.asarray(self.raw, dtype=np.float64)
            if raw.shape != bits.shape:
                raise ShapeError("raw values and bits differ in length")
            object.__setattr__(self, "raw", raw)

    def __len__(self):
        return self.bits.size

    @property
    def selected(self):
        return frozenset(int(j) for j in np.flatnonzero(self.bits))

    @property
    def count(self):
        return int(self.bits.sum())

    @classmethod
    def ones(cls, d):
        return cls(np.ones(d, dtype=np.uint8), 0.0)


def binarize(m, threshold):
    """Keep inputs whose strength is at least ``threshold``.

    Values equal to the threshold survive; only strictly smaller ones are
    zeroed.
    """
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    values = m.values if isinstance(m, MaskVector) else np.asarray(m, dtype=np.float64)
    return BinaryMask((values >= threshold).astype(np.uint8), float(threshold), values)


def write_mask(path, mask):
    """Write ``d``, the threshold, then one ``raw_value bit`` line per input."""
    raw = mask.raw if mask.raw is not None else mask.bits.astype(np.float64)
    lines = [str(len(mask)), repr(float(mask.threshold))]
    lines += [f"{float(r)!r} {int(b)}" for r, b in zip(raw, mask.bits)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mask(path):
    lines = Path(path).read_text().splitlines()
    lines = [ln for ln in lines if ln.strip()]
    if len(lines) < 2:
        raise FormatError(f"{path}: mask file needs at least two lines")
    try:
        d = int(lines[0])
        threshold = float(lines[1])
    except ValueError as exc:
        raise FormatError(f"{path}: bad mask header: {exc}") from None
    body = lines[2:]
    if len(body) != d:
        raise FormatError(f"{path}: header says d={d} but found {len(body)} entries")
    raw = np.empty(d)
    bits = np.empty(d, dtype=np.uint8)
    for i, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != 2 or parts[1] not in ("0", "1"):
            raise FormatError(f"{path}: line {i + 3}: expected 'raw_value bit'")
        raw[i] = float(parts[0])
        bits[i] = int(parts[1])
    return BinaryMask(bits, threshold, raw)


def write_mask_vector(path, m):
    """Raw masking vector in the mask layout with threshold 0 (all bits set)."""
    write_mask(path, binarize(m, 0.0))


def read_mask_vector(path):
    return MaskVector(read_mask(path).raw)
