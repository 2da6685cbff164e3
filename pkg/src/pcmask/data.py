"""Tabular datasets: schema, scaling, splits, batching, file formats, generators.

Synthetic generators plant a known set of driver inputs among correlated
distractors so that input selection can be scored against ground truth.
"""

import configparser
import csv
import dataclasses
import json
import re
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from pcmask.errors import DataError, FormatError, ParseError


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Mechanism(str, Enum):
    SPARSE_LINEAR = "sparse_linear"
    COLUMN_NONLINEAR = "column_nonlinear"


@dataclass(frozen=True)
class DatasetSchema:
    input_names: tuple
    output_name: str
    output_norm_constant: float = 1.0
    input_scaling: str = "standardize"
    group_name: str | None = None

    def __post_init__(self):
        names = tuple(self.input_names)
        object.__setattr__(self, "input_names", names)
        allnames = list(names) + [self.output_name] + ([self.group_name] if self.group_name else [])
        if len(set(allnames)) != len(allnames):
            raise DataError("schema column names must be unique")
        if not self.output_norm_constant > 0:
            raise DataError("output_norm_constant must be positive")
        if self.input_scaling not in ("standardize", "none"):
            raise DataError(f"input_scaling must be 'standardize' or 'none', got {self.input_scaling!r}")

    @property
    def d(self):
        return len(self.input_names)

    @classmethod
    def default(cls, d, output_name="y", **kw):
        return cls(tuple(f"x{j}" for j in range(d)), output_name, **kw)


def write_schema(path, schema):
    cp = configparser.ConfigParser()
    cp["schema"] = {
        "output": schema.output_name,
        "output_norm_constant": repr(schema.output_norm_constant),
        "input_scaling": schema.input_scaling,
    }
    if schema.group_name:
        cp["schema"]["group"] = schema.group_name
    cp["inputs"] = {"names": ", ".join(schema.input_names)}
    with open(path, "w") as fh:
        cp.write(fh)


def read_schema(path):
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise DataError(f"cannot read schema file {path}")
    try:
        sec = cp["schema"]
        names = [n.strip() for n in cp["inputs"]["names"].replace("\n", ",").split(",") if n.strip()]
        return DatasetSchema(
            tuple(names),
            sec["output"],
            float(sec.get("output_norm_constant", "1.0")),
            sec.get("input_scaling", "standardize").lower(),
            sec.get("group") or None,
        )
    except KeyError as exc:
        raise DataError(f"{path}: schema is missing {exc}") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class ScalerStats:
    mean: np.ndarray
    std: np.ndarray
    output_scale: float = 1.0

    def to_json(self):
        return json.dumps(
            {"mean": self.mean.tolist(), "std": self.std.tolist(), "output_scale": self.output_scale}
        )

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        return cls(np.array(obj["mean"], dtype=np.float64), np.array(obj["std"], dtype=np.float64), obj["output_scale"])


@dataclass(frozen=True)
class Dataset:
    schema: DatasetSchema
    X: np.ndarray
    y: np.ndarray
    split: Split | None = None
    scaler: ScalerStats | None = None
    truth_drivers: frozenset | None = None
    groups: np.ndarray | None = None

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.float64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.size:
            raise DataError(f"X has shape {X.shape} but y has {y.size} rows")
        if X.shape[1] != self.schema.d:
            raise DataError(f"X has {X.shape[1]} columns, schema names {self.schema.d}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.groups is not None:
            g = np.asarray(self.groups, dtype=np.int64).reshape(-1)
            if g.size != y.size:
                raise DataError("groups length differs from sample count")
            object.__setattr__(self, "groups", g)
        if self.truth_drivers is not None:
            object.__setattr__(self, "truth_drivers", frozenset(int(j) for j in self.truth_drivers))

    @property
    def n(self):
        return self.y.size

    @property
    def d(self):
        return self.X.shape[1]

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def take(self, idx, split=None):
        return self.replace(
            X=self.X[idx],
            y=self.y[idx],
            groups=None if self.groups is None else self.groups[idx],
            split=split,
        )


# -- scaling ----------------------------------------------------------------


def fit_scaler(train):
    """Per-column mean/std (population) from the training split only."""
    if train.split not in (None, Split.TRAIN):
        raise DataError(f"scaler must be fit on the training split, got {train.split.value}")
    if train.schema.input_scaling == "none":
        return ScalerStats(np.zeros(train.d), np.ones(train.d), train.schema.output_norm_constant)
    mean = train.X.mean(axis=0)
    std = train.X.std(axis=0)
    for j in np.flatnonzero(~(std > 0)):
        raise DataError(f"column {train.schema.input_names[j]!r} has zero variance")
    return ScalerStats(mean, std, train.schema.output_norm_constant)


def apply_scaler(stats, ds):
    """Standardize inputs; multiply the output by the schema normalization constant."""
    X = (ds.X - stats.mean) / stats.std
    return ds.replace(X=X, y=ds.y * stats.output_scale, scaler=stats)


def invert_scaler(stats, ds):
    return ds.replace(X=ds.X * stats.std + stats.mean, y=ds.y / stats.output_scale, scaler=None)


# -- splitting and batching -------------------------------------------------


def shuffle_and_split(raw, fractions=(1 / 3, 1 / 3, 1 / 3), seed=42):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("fractions must be three nonnegative numbers summing to 1")
    n = raw.n
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(n, int(round(fractions[0] * n)))
    n_val = min(n - n_train, int(round(fractions[1] * n)))
    if fractions[2] == 0:
        n_val = n - n_train
    counts = (n_train, n_val, n - n_train - n_val)
    for split, f, c in zip(Split, fractions, counts):
        if f > 0 and c == 0:
            raise DataError(f"{split.value} split is empty for {n} rows")
    bounds = np.cumsum((0,) + counts)
    return {
        split: raw.take(perm[bounds[i] : bounds[i + 1]], split)
        for i, split in enumerate(Split)
    }


def epoch_rng(seed, epoch):
    """Per-epoch generator: ``SeedSequence([seed, epoch])`` feeding PCG64."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))


def batches(ds, batch_size, seed=42, epoch=0, shuffle=True):
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_rng(seed, epoch).permutation(ds.n) if shuffle else np.arange(ds.n)
    for i in range(0, ds.n, batch_size):
        idx = order[i : i + batch_size]
        yield ds.X[idx], ds.y[idx]


# -- synthetic data ---------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings.

    For ``sparse_linear`` the driver set holds input indices; for
    ``column_nonlinear`` it holds *levels*, every channel at a driver level is a
    driver, and the lowest ``lower_block`` driver levels form the non-local
    block. Inputs are laid out channel-major: index ``c * n_levels + level``.
    """

    d: int
    n_samples: int
    driver_set: tuple
    mechanism: Mechanism = Mechanism.SPARSE_LINEAR
    spurious_corr: float = 0.0
    noise_std: float = 0.0
    shift: int = 0
    seed: int = 42
    weights: tuple | None = None
    n_levels: int = 1
    lower_block: int = 2
    n_groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mechanism", Mechanism(self.mechanism))
        object.__setattr__(self, "driver_set", tuple(sorted(int(j) for j in self.driver_set)))
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    def validate(self):
        if self.d < 1 or self.n_samples < 1:
            raise DataError("d and n_samples must be positive")
        if not self.driver_set:
            raise DataError("driver_set is empty")
        if len(set(self.driver_set)) != len(self.driver_set):
            raise DataError("driver_set has duplicates")
        if not 0.0 <= self.spurious_corr < 1.0:
            raise DataError("spurious_corr must lie in [0, 1)")
        if self.noise_std < 0:
            raise DataError("noise_std must be nonnegative")
        if self.n_groups < 1:
            raise DataError("n_groups must be >= 1")
        limit = self.d
        if self.mechanism is Mechanism.COLUMN_NONLINEAR:
            if self.n_levels < 1 or self.d % self.n_levels:
                raise DataError(f"n_levels={self.n_levels} does not divide d={self.d}")
            limit = self.n_levels
        for j in self.driver_set:
            if not 0 <= j < limit or not 0 <= j + self.shift < limit:
                raise DataError(f"driver_set entry {j} (shift {self.shift}) outside [0, {limit})")
        if self.weights is not None and self.mechanism is Mechanism.SPARSE_LINEAR:
            if len(self.weights) != len(self.driver_set):
                raise DataError("weights must have one entry per driver")
        return self

    @property
    def n_channels(self):
        return self.d // self.n_levels


def translate_indices(indices, shift, n_levels, n_channels=1):
    """Move channel-major input indices by ``shift`` levels; out-of-range ones are dropped."""
    out = set()
    for j in indices:
        c, level = divmod(int(j), n_levels)
        if 0 <= level + shift < n_levels and c < n_channels:
            out.add(c * n_levels + level + shift)
    return frozenset(out)


def _signed_uniform(rng, lo, hi, size):
    return rng.choice([-1.0, 1.0], size=size) * rng.uniform(lo, hi, size=size)


def generate_synthetic(spec):
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n_samples, spec.d
    rho = spec.spurious_corr
    groups = rng.integers(0, spec.n_groups, size=n) if spec.n_groups > 1 else np.zeros(n, dtype=np.int64)
    if spec.n_groups > 1:
        # mean noise scale stays noise_std; higher groups are noisier
        noise_scale = 0.5 + groups / (spec.n_groups - 1)
    else:
        noise_scale = np.ones(n)

    if spec.mechanism is Mechanism.SPARSE_LINEAR:
        base = list(spec.driver_set)
        w = np.array(spec.weights) if spec.weights is not None else _signed_uniform(rng, 1.0, 2.0, len(base))
        Z = rng.standard_normal((n, d))
        drivers = [j + spec.shift for j in base]
        others = [j for j in range(d) if j not in drivers]
        X = np.empty((n, d))
        X[:, drivers] = Z[:, base]
        for k, j in enumerate(others):
            parent = drivers[k % len(drivers)]
            X[:, j] = rho * X[:, parent] + np.sqrt(1.0 - rho * rho) * Z[:, j]
        y = X[:, drivers] @ w
        truth = frozenset(drivers)
    else:
        L, C = spec.n_levels, spec.n_channels
        levels = [lv + spec.shift for lv in spec.driver_set]
        lower = levels[: spec.lower_block]
        local = levels[spec.lower_block :]
        w = _signed_uniform(rng, 0.5, 1.0, (C, len(levels)))
        eps = rng.standard_normal((n, C, L))
        cube = np.empty((n, C, L))
        cube[:, :, 0] = eps[:, :, 0]
        for lv in range(1, L):
            cube[:, :, lv] = rho * cube[:, :, lv - 1] + np.sqrt(1.0 - rho * rho) * eps[:, :, lv]
        X = cube.reshape(n, C * L)
        wl = w[:, : len(lower)]
        wn = w[:, len(lower) :]
        s_lower = np.einsum("ncl,cl->n", cube[:, :, lower], wl) / np.sqrt(max(wl.size, 1))
        s_local = np.einsum("ncl,cl->n", cube[:, :, local], wn) / np.sqrt(max(wn.size, 1))
        y = np.tanh(s_local) + 0.5 * s_lower + 0.3 * s_local * np.tanh(s_lower)
        truth = frozenset(c * L + lv for c in range(C) for lv in levels)

    y = y + spec.noise_std * noise_scale * rng.standard_normal(n)
    schema = DatasetSchema.default(d, group_name="group" if spec.n_groups > 1 else None)
    return Dataset(schema, X, y, truth_drivers=truth, groups=groups if spec.n_groups > 1 else None)


def write_synthetic_spec(path, spec):
    cp = configparser.ConfigParser()
    sec = {f.name: getattr(spec, f.name) for f in dataclasses.fields(spec)}
    sec["mechanism"] = spec.mechanism.value
    sec["driver_set"] = ", ".join(str(j) for j in spec.driver_set)
    sec["weights"] = "" if spec.weights is None else ", ".join(repr(w) for w in spec.weights)
    cp["synthetic"] = {k: str(v) for k, v in sec.items()}
    with open(path, "w") as fh:
        cp.write(fh)


def synthetic_spec_from_section(sec):
    """Build a spec from a mapping of strings (a config-file section)."""
    def ints(text):
        return tuple(int(t) for t in re.split(r"[,\s]+", text.strip()) if t)

    def floats(text):
        return tuple(float(t) for t in re.split(r"[,\s]+", text.strip()) if t)

    known = {f.name for f in dataclasses.fields(SyntheticSpec)}
    unknown = set(sec) - known
    if unknown:
        raise DataError(f"unknown synthetic field(s): {', '.join(sorted(unknown))}")
    try:
        kw = {
            "d": int(sec["d"]),
            "n_samples": int(sec["n_samples"]),
            "driver_set": ints(sec.get("driver_set", "")),
        }
        for name in ("spurious_corr", "noise_std"):
            if name in sec:
                kw[name] = float(sec[name])
        for name in ("shift", "seed", "n_levels", "lower_block", "n_groups"):
            if name in sec:
                kw[name] = int(sec[name])
        if sec.get("mechanism"):
            kw["mechanism"] = Mechanism(sec["mechanism"].strip().lower())
        if sec.get("weights", "").strip():
            kw["weights"] = floats(sec["weights"])
    except KeyError as exc:
        raise DataError(f"synthetic spec is missing field {exc}") from None
    except ValueError as exc:
        raise DataError(f"synthetic spec: {exc}") from None
    return SyntheticSpec(**kw).validate()


# -- file formats -----------------------------------------------------------

_FLOAT_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


def _strict_float(text, line, col):
    t = text.strip()
    if not _FLOAT_RE.match(t):
        raise ParseError(f"column {col!r}: not a finite number: {text!r}", line)
    return float(t)


def load_csv(path, schema, split=None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        pos = {name: i for i, name in enumerate(header)}
        wanted = list(schema.input_names) + [schema.output_name]
        missing = [c for c in wanted if c not in pos]
        if schema.group_name and schema.group_name not in pos:
            missing.append(schema.group_name)
        if missing:
            raise ParseError(f"missing column(s): {', '.join(missing)}", 1)
        cols = [pos[c] for c in wanted]
        gcol = pos[schema.group_name] if schema.group_name else None
        rows, groups = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} cells, found {len(row)}", lineno)
            rows.append([_strict_float(row[i], lineno, header[i]) for i in cols])
            if gcol is not None:
                g = row[gcol].strip()
                if not re.fullmatch(r"[+-]?\d+", g):
                    raise ParseError(f"group id {g!r} is not an integer", lineno)
                groups.append(int(g))
    arr = np.array(rows, dtype=np.float64).reshape(-1, len(wanted))
    return Dataset(
        schema, arr[:, :-1], arr[:, -1], split=split,
        groups=np.array(groups, dtype=np.int64) if gcol is not None else None,
    )


def save_csv(path, ds):
    names = list(ds.schema.input_names) + [ds.schema.output_name]
    if ds.groups is not None:
        names.append(ds.schema.group_name or "group")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.X[i]] + [repr(float(ds.y[i]))]
            if ds.groups is not None:
                row.append(str(int(ds.groups[i])))
            w.writerow(row)


DATA_MAGIC = b"PCMDATA1"


def save_binary(path, ds):
    """Magic, u32 header length, UTF-8 JSON header, then X, y (and groups) little-endian."""
    header = {
        "n": ds.n,
        "d": ds.d,
        "split": None if ds.split is None else ds.split.value,
        "schema": {
            "input_names": list(ds.schema.input_names),
            "output_name": ds.schema.output_name,
            "output_norm_constant": ds.schema.output_norm_constant,
            "input_scaling": ds.schema.input_scaling,
            "group_name": ds.schema.group_name,
        },
        "truth_drivers": None if ds.truth_drivers is None else sorted(ds.truth_drivers),
        "has_groups": ds.groups is not None,
        "scaler": None if ds.scaler is None else json.loads(ds.scaler.to_json()),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [DATA_MAGIC, struct.pack("<I", len(hb)), hb, ds.X.astype("<f8").tobytes(), ds.y.astype("<f8").tobytes()]
    if ds.groups is not None:
        parts.append(ds.groups.astype("<i8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_binary(path):
    data = Path(path).read_bytes()
    if data[:8] != DATA_MAGIC:
        raise FormatError(f"{path}: not a pcmask binary dataset")
    try:
        (hlen,) = struct.unpack_from("<I", data, 8)
        header = json.loads(data[12 : 12 + hlen])
        off = 12 + hlen
        n, d = header["n"], header["d"]
        X = np.frombuffer(data, "<f8", n * d, off).reshape(n, d).astype(np.float64)
        off += 8 * n * d
        y = np.frombuffer(data, "<f8", n, off).astype(np.float64)
        off += 8 * n
        groups = None
        if header["has_groups"]:
            groups = np.frombuffer(data, "<i8", n, off).astype(np.int64)
            off += 8 * n
    except (ValueError, KeyError, struct.error) as exc:
        raise FormatError(f"{path}: corrupt dataset ({exc})") from None
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    s = header["schema"]
    schema = DatasetSchema(tuple(s["input_names"]), s["output_name"], s["output_norm_constant"], s["input_scaling"], s["group_name"])
    scaler = None
    if header.get("scaler"):
        scaler = ScalerStats.from_json(json.dumps(header["scaler"]))
    return Dataset(
        schema, X, y,
        split=None if header["split"] is None else Split(header["split"]),
        scaler=scaler,
        truth_drivers=None if header["truth_drivers"] is None else frozenset(header["truth_drivers"]),
        groups=groups,
    )


def load_dataset(path, schema=None, split=None):
    """Binary if the file starts with the binary magic, CSV otherwise."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == DATA_MAGIC:
        ds = load_binary(path)
        return ds if split is None else ds.replace(split=split)
    if schema is None:
        raise DataError(f"{path}: CSV datasets need a schema")
    return load_csv(path, schema, split)


def write_truth(path, indices):
    Path(path).write_text("".join(f"{j}\n" for j in sorted(indices)))


def read_truth(path):
    text = Path(path).read_text().split()
    try:
        return frozenset(int(t) for t in text)
    except ValueError:
        raise FormatError(f"{path}: truth file must list integer indices") from None
