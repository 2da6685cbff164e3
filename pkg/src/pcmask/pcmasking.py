"""Two-phase input masking.

1. Pre-mask phase: a square dense input layer feeds the hidden block; its
   kernel carries an entrywise L1 penalty scaled by ``1 / d**2``.
2. The L2 norm of every input-kernel column gives a per-input strength.
3. Strengths are thresholded on a grid below their 70th percentile; each
   threshold fine-tunes a warm-started copy of the network with the input
   kernel replaced by elementwise gating.
4. The threshold with the lowest final training loss wins.
"""

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from pcmask.data import batches
from pcmask.errors import DegenerateGridError, ModeError, NumericError, PCMaskError, UsageError
from pcmask.masks import BinaryMask, MaskVector, binarize
from pcmask.nncore import (
    DEFAULT_HIDDEN,
    DEFAULT_SLOPE,
    AdamState,
    LossBreakdown,
    LrSchedule,
    Mode,
    _chunked,
    build_network,
    l1_penalty,
    loss_and_grad,
    to_mask_mode,
)

log = logging.getLogger(__name__)

GRID_START = 1e-4
GRID_PERCENTILE = 70.0


@dataclass(frozen=True)
class TrainingConfig:
    lam: float = 0.001
    epochs_premask: int = 9
    epochs_mask: int = 9
    lr_schedule: LrSchedule = field(default_factory=LrSchedule)
    train_batch: int = 1024
    eval_batch: int = 8192
    seed: int = 42
    n_thresholds: int = 20
    hidden: tuple = DEFAULT_HIDDEN
    slope: float = DEFAULT_SLOPE
    input_init: str = "zeros"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        counts = (self.epochs_premask, self.epochs_mask, self.train_batch, self.eval_batch, self.n_thresholds)
        if min(counts) < 1 or self.lam < 0:
            raise ValueError("epoch/batch/threshold counts must be >= 1 and lambda >= 0")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")


@dataclass
class TrainResult:
    """Outcome of one training phase.

    ``history`` holds, per epoch, the sample-weighted mean of the minibatch
    losses seen during that epoch (the usual "training loss" of an epoch).
    ``initial`` and ``final_full`` are full passes over the training set before
    and after training.
    """

    net: object
    initial: LossBreakdown
    history: list
    final_full: LossBreakdown | None = None
    val: LossBreakdown | None = None

    @property
    def final(self):
        return self.history[-1] if self.history else self.initial


def evaluate_loss(net, ds, lam=0.0, batch_size=8192):
    pred = _chunked(net, ds.X, batch_size)
    mse = float(np.mean((ds.y - pred) ** 2))
    pen = float(l1_penalty(net, lam)) if net.mode is Mode.PREMASK else 0.0
    return LossBreakdown(mse, pen, mse + pen)


def _fit(net, train, config, epochs, lam, val=None):
    params = net.parameters()
    state = AdamState.zeros_like(params)
    result = TrainResult(net, evaluate_loss(net, train, lam, config.eval_batch), [])
    for epoch in range(epochs):
        lr = config.lr_schedule.at(epoch)
        sums = np.zeros(3)
        for b, (Xb, yb) in enumerate(batches(train, config.train_batch, config.seed, epoch)):
            try:
                loss, grads = loss_and_grad(net, Xb, yb, lam)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b}: {exc}", exc.layer, epoch, b) from None
            if not np.isfinite(loss.total):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {b}", epoch=epoch, batch=b)
            state.apply(params, grads, lr)
            sums += yb.size * np.array([loss.mse, loss.l1_penalty, loss.total])
        mse, pen, total = sums / train.n
        result.history.append(LossBreakdown(float(mse), float(pen), float(total)))
        log.debug("epoch %d lr %.2e loss %.6g", epoch, lr, total)
    result.final_full = evaluate_loss(net, train, lam, config.eval_batch)
    if val is not None:
        result.val = evaluate_loss(net, val, 0.0, config.eval_batch)
    return result


def train_premask(train, config, val=None):
    """Fit a fresh pre-mask network on the sparsity-penalized objective."""
    net = build_network(
        train.d, config.hidden, config.slope, Mode.PREMASK, seed=config.seed, input_init=config.input_init
    )
    return _fit(net, train, config, config.epochs_premask, config.lam, val)


def extract_mask_vector(net):
    if net.mode is not Mode.PREMASK:
        raise ModeError("mask vector extraction needs a pre-mask network")
    return MaskVector(np.linalg.norm(net.input_kernel.weights, axis=0))


@dataclass(frozen=True)
class ThresholdGrid:
    thresholds: tuple
    p70: float
    requested: int

    def __len__(self):
        return len(self.thresholds)


def build_threshold_grid(m, n=20):
    """``n`` evenly spaced points on ``[1e-4, p70)``, rounded to 4 decimals.

    ``p70`` is the linearly interpolated 70th percentile of the strengths.
    Rounding can merge neighbours or land on ``p70``; such points are dropped
    and ``len(grid)`` reports the effective size.
    """
    if n < 1:
        raise UsageError("need at least one threshold")
    values = m.values if isinstance(m, MaskVector) else MaskVector(m).values
    p70 = float(np.percentile(values, GRID_PERCENTILE, method="linear"))
    if not p70 > GRID_START:
        raise DegenerateGridError(f"70th percentile {p70:.3g} is not above {GRID_START}")
    step = (p70 - GRID_START) / n
    out = []
    for i in range(n):
        t = round(GRID_START + i * step, 4)
        if GRID_START <= t < p70 and (not out or t > out[-1]):
            out.append(t)
    return ThresholdGrid(tuple(out), p70, n)


def train_mask(premask_net, mask, train, config, val=None):
    """Fine-tune with inputs gated by ``mask``, starting from the pre-mask weights."""
    if mask.count == 0:
        warnings.warn("all-zero mask: the network only sees its biases", RuntimeWarning, stacklevel=2)
    net = to_mask_mode(premask_net, mask)
    return _fit(net, train, config, config.epochs_mask, 0.0, val)


@dataclass
class SweepRecord:
    threshold: float
    bits: np.ndarray
    final_train_loss: float
    final_val_loss: float
    selected_count: int
    error: str | None = None


@dataclass
class SweepResult:
    records: list
    grid: ThresholdGrid | None = None
    networks: list = field(default_factory=list)  # parallel to records; None on failure

    def __len__(self):
        return len(self.records)


def _sweep_one(premask_net, m, t, train, config, val):
    mask = binarize(m, t)
    try:
        res = train_mask(premask_net, mask, train, config, val)
    except PCMaskError as exc:
        log.warning("threshold %g failed: %s", t, exc)
        rec = SweepRecord(t, mask.bits, float("nan"), float("nan"), mask.count, str(exc))
        return rec, None
    vloss = res.val.total if res.val is not None else float("nan")
    rec = SweepRecord(t, mask.bits, res.final.total, vloss, mask.count)
    return rec, res.net


def sweep_thresholds(premask_net, train, config, val=None, grid=None, jobs=1):
    """One independent warm-started fine-tune per grid threshold.

    Every run starts from the same snapshot and shuffles with ``config.seed``,
    so runs differ only in their mask and the sweep is order independent.
    """
    m = extract_mask_vector(premask_net)
    if grid is None:
        grid = build_threshold_grid(m, config.n_thresholds)
    thresholds = grid.thresholds if isinstance(grid, ThresholdGrid) else tuple(grid)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(lambda t: _sweep_one(premask_net, m, t, train, config, val), thresholds))
    else:
        outs = [_sweep_one(premask_net, m, t, train, config, val) for t in thresholds]
    return SweepResult(
        [r for r, _ in outs],
        grid if isinstance(grid, ThresholdGrid) else None,
        [n for _, n in outs],
    )


@dataclass
class Selection:
    index: int
    threshold: float
    record: SweepRecord
    network: object


def select_best(sweep):
    """Lowest final training loss; equal losses go to the larger threshold."""
    ok = [i for i, r in enumerate(sweep.records) if r.error is None and np.isfinite(r.final_train_loss)]
    if not ok:
        raise UsageError("no successful sweep records to select from")
    i = min(ok, key=lambda k: (sweep.records[k].final_train_loss, -sweep.records[k].threshold))
    rec = sweep.records[i]
    net = sweep.networks[i] if i < len(sweep.networks) else None
    return Selection(i, rec.threshold, rec, net)


@dataclass
class PipelineResult:
    premask: TrainResult
    mask_vector: MaskVector
    grid: ThresholdGrid
    sweep: SweepResult
    best: Selection

    @property
    def mask(self):
        return BinaryMask(self.best.record.bits, self.best.threshold, self.mask_vector.values)


def run_pcmasking(train, config, val=None, jobs=1):
    pre = train_premask(train, config, val)
    m = extract_mask_vector(pre.net)
    grid = build_threshold_grid(m, config.n_thresholds)
    sweep = sweep_thresholds(pre.net, train, config, val, grid, jobs)
    return PipelineResult(pre, m, grid, sweep, select_best(sweep))


SWEEP_COLUMNS = ("threshold", "selected_count", "final_train_loss", "final_val_loss", "bits", "error")


def write_sweep_csv(path, sweep):


    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in sweep.records:
            w.writerow([
                repr(r.threshold), r.selected_count, repr(r.final_train_loss),
                repr(r.final_val_loss), "".join(str(int(b)) for b in r.bits), r.error or "",
            ])


def read_sweep_csv(path):


    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            bits = np.array([int(c) for c in row["bits"]], dtype=np.uint8)
            records.append(SweepRecord(
                float(row["threshold"]), bits, float(row["final_train_loss"]),
                float(row["final_val_loss"]), int(row["selected_count"]), row["error"] or None,
            ))
    return SweepResult(records)
