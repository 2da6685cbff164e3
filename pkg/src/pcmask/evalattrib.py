"""Skill scores, Shapley attributions, driver recovery and mask comparison.

Shapley values use the interventional value function

    v(S) = mean_b f(x_S, b_{~S})

over a background set ``b``: features in the coalition come from the
explained sample, the rest from each background row.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from pcmask.errors import ShapeError, UsageError

MAX_EXACT_FEATURES = 15
# rows handed to the model per call in exact enumeration
_EXACT_ROWS = 1 << 18


@dataclass(frozen=True)
class R2Report:
    r2: float | None
    mse: float
    n: int
    target_name: str = ""

    @property
    def defined(self):
        return self.r2 is not None


def r2(predictions, targets, target_name=""):
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.size != y.size:
        raise ShapeError(f"{p.size} predictions for {y.size} targets")
    if y.size < 2:
        raise UsageError("R^2 needs at least two samples")
    ss_res = float(np.sum((y - p) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    score = None if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return R2Report(score, ss_res / y.size, int(y.size), target_name)


# -- Shapley values ---------------------------------------------------------


def _prepare(x, background):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    bg = np.asarray(background, dtype=np.float64)
    if bg.ndim == 1:
        bg = bg[None, :]
    if bg.shape[0] == 0:
        raise UsageError("background set is empty")
    if bg.shape[1] != x.size:
        raise ShapeError(f"sample has {x.size} features, background has {bg.shape[1]}")
    return x, bg


def _shapley_weights(d):
    # weight for a coalition of size s not containing the player
    return np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) for s in range(d)])


def coalition_values(model, x, background):
    """``v(S)`` for every coalition, indexed by bitmask (bit j set = j in S)."""
    x, bg = _prepare(x, background)
    d = x.size
    n_coal = 1 << d
    masks = ((np.arange(n_coal)[:, None] >> np.arange(d)) & 1).astype(bool)
    totals = np.zeros(n_coal)
    # chunk over background rows so each call sees all coalitions of its rows
    step = max(1, _EXACT_ROWS // n_coal)
    for start in range(0, bg.shape[0], step):
        chunk = bg[start : start + step]
        rows = np.where(masks[None, :, :], x[None, None, :], chunk[:, None, :])
        out = np.asarray(model(rows.reshape(-1, d)), dtype=np.float64).reshape(chunk.shape[0], n_coal)
        totals += out.sum(axis=0)
    return totals / bg.shape[0]


def shapley_exact(model, x, background):
    """Exact Shapley values by enumerating all ``2**d`` coalitions."""
    x, bg = _prepare(x, background)
    d = x.size
    if d > MAX_EXACT_FEATURES:
        raise UsageError(f"exact enumeration is limited to {MAX_EXACT_FEATURES} features; use shapley_sampled")
    v = coalition_values(model, x, bg)
    idx = np.arange(1 << d)
    sizes = np.array([bin(i).count("1") for i in range(1 << d)])
    w = _shapley_weights(d)
    phi = np.empty(d)
    for j in range(d):
        without = idx[(idx >> j) & 1 == 0]
        phi[j] = np.sum(w[sizes[without]] * (v[without | (1 << j)] - v[without]))
    return phi


@dataclass
class SampledShapley:
    values: np.ndarray
    stderr: np.ndarray
    n_permutations: int


def shapley_sampled(model, x, background, n_permutations=100, seed=42):
    """Permutation-sampling estimate with per-feature standard errors.

    Each permutation adds features one at a time; its marginal contributions
    telescope to ``f(x) - mean f(background)`` exactly. All ``d + 1`` prefix
    coalitions of a permutation go to the model in one call.
    """
    if n_permutations < 1:
        raise UsageError("n_permutations must be >= 1")
    x, bg = _prepare(x, background)
    d = x.size
    nb = bg.shape[0]
    rng = np.random.default_rng(seed)
    contrib = np.empty((n_permutations, d))
    tri = np.tri(d + 1, d, k=-1, dtype=bool)  # row k: first k positions taken from x
    for p in range(n_permutations):
        perm = rng.permutation(d)
        take = np.zeros((d + 1, d), dtype=bool)
        take[:, perm] = tri
        rows = np.where(take[None, :, :], x[None, None, :], bg[:, None, :])
        out = np.asarray(model(rows.reshape(-1, d)), dtype=np.float64).reshape(nb, d + 1)
        v = out.mean(axis=0)
        contrib[p, perm] = np.diff(v)
    values = contrib.mean(axis=0)
    if n_permutations > 1:
        stderr = contrib.std(axis=0, ddof=1) / np.sqrt(n_permutations)
    else:
        stderr = np.full(d, np.inf)
    return SampledShapley(values, stderr, n_permutations)


@dataclass
class AttributionMatrix:
    """Mean absolute attributions; one row per output, one column per input."""

    values: np.ndarray
    input_names: tuple
    output_names: tuple
    sample_count: int
    baseline: str

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["output"] + list(self.input_names))
            for name, row in zip(self.output_names, self.values):
                w.writerow([name] + [repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        vals = np.array([[float(c) for c in r[1:]] for r in body])
        return cls(vals, tuple(header[1:]), tuple(r[0] for r in body), 0, "")


def mean_abs_attribution(model, samples, background, method="sampled", n_permutations=64, seed=42):
    """Row of mean ``|phi_j|`` over ``samples``."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise UsageError("need a nonempty 2-d sample array")
    total = np.zeros(samples.shape[1])
    for i, x in enumerate(samples):
        if method == "exact":
            phi = shapley_exact(model, x, background)
        elif method == "sampled":
            phi = shapley_sampled(model, x, background, n_permutations, seed + i).values
        else:
            raise UsageError(f"unknown attribution method {method!r}")
        total += np.abs(phi)
    return total / samples.shape[0]


def background_sample(X, n=100, seed=42):
    """Fixed-seed draw of ``n`` rows without replacement (all rows if fewer)."""
    X = np.asarray(X)
    if X.shape[0] <= n:
        return X.copy()
    idx = np.random.default_rng(seed).choice(X.shape[0], size=n, replace=False)
    return X[np.sort(idx)]


# -- driver recovery and mask comparison ------------------------------------


@dataclass(frozen=True)
class DriverRecoveryReport:
    precision: float | None
    recall: float | None
    selected: frozenset
    truth: frozenset

    @property
    def precision_defined(self):
        return self.precision is not None

    @property
    def recall_defined(self):
        return self.recall is not None

    @property
    def exact(self):
        return self.selected == self.truth

    def to_dict(self):
        return {
            "precision": self.precision,
            "recall": self.recall,
            "precision_defined": self.precision_defined,
            "recall_defined": self.recall_defined,
            "selected": sorted(self.selected),
            "truth": sorted(self.truth),
        }


def _index_set(s):
    """BinaryMask or boolean array -> selected indices; anything else is an index set."""
    bits = getattr(s, "bits", None)
    if bits is None and isinstance(s, np.ndarray) and s.dtype == bool:
        bits = s
    if bits is not None:
        return frozenset(int(j) for j in np.flatnonzero(bits))
    return frozenset(int(j) for j in s)


def driver_recovery(selected, truth):
    """Precision and recall; ``None`` marks an empty denominator."""
    S, T = _index_set(selected), _index_set(truth)
    hit = len(S & T)
    precision = hit / len(S) if S else None
    recall = hit / len(T) if T else None
    return DriverRecoveryReport(precision, recall, S, T)


@dataclass
class GroupOverlap:
    group: object
    only_a: frozenset
    only_b: frozenset
    both: frozenset


@dataclass
class OverlapReport:
    groups: list
    jaccard: float | None
    only_a: frozenset = field(default_factory=frozenset)
    only_b: frozenset = field(default_factory=frozenset)
    both: frozenset = field(default_factory=frozenset)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group", "only_a", "only_b", "both"])
            for g in self.groups:
                w.writerow([g.group, len(g.only_a), len(g.only_b), len(g.both)])
            w.writerow(["all", len(self.only_a), len(self.only_b), len(self.both)])

    def to_dict(self):
        return {
            "jaccard": self.jaccard,
            "only_a": sorted(self.only_a),
            "only_b": sorted(self.only_b),
            "both": sorted(self.both),
            "groups": [
                {"group": g.group, "only_a": len(g.only_a), "only_b": len(g.only_b), "both": len(g.both)}
                for g in self.groups
            ],
        }


def jaccard(a, b):
    A, B = _index_set(a), _index_set(b)
    union = A | B
    return len(A & B) / len(union) if union else None


def compare_masks(mask_a, mask_b, level_map=None):
    """Partition the union of selected inputs into only-A / only-B / both.

    ``level_map[j]`` assigns input ``j`` to a group (e.g. its vertical level);
    without one, everything falls in a single group ``"all"``.
    """
    la, lb = len(mask_a), len(mask_b)
    if la != lb:
        raise ShapeError(f"masks differ in length ({la} vs {lb})")
    A, B = _index_set(mask_a), _index_set(mask_b)
    if level_map is None:
        level_map = ["all"] * la
    elif len(level_map) != la:
        raise ShapeError("level_map length differs from mask length")
    groups = []
    for g in dict.fromkeys(level_map):
        members = {j for j in range(la) if level_map[j] == g}
        groups.append(GroupOverlap(g, frozenset((A - B) & members), frozenset((B - A) & members), frozenset(A & B & members)))
    return OverlapReport(groups, jaccard(A, B), frozenset(A - B), frozenset(B - A), frozenset(A & B))


# -- profiles ---------------------------------------------------------------


@dataclass
class ProfileRow:
    group: int
    n: int
    mean_prediction: float
    mean_truth: float
    r2: float | None


@dataclass
class ProfileReport:
    rows: list

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group", "n", "mean_prediction", "mean_truth", "r2", "r2_defined"])
            for r in self.rows:
                w.writerow([r.group, r.n, repr(r.mean_prediction), repr(r.mean_truth),
                            "" if r.r2 is None else repr(r.r2), int(r.r2 is not None)])


def profile_report(predictions, targets, group_ids):
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    g = np.asarray(group_ids).reshape(-1)
    if not p.size == y.size == g.size:
        raise ShapeError("predictions, targets and group ids differ in length")
    rows = []
    for gid in np.unique(g):
        sel = g == gid
        yy, pp = y[sel], p[sel]
        score = None
        if yy.size >= 2:
            score = r2(pp, yy).r2
        rows.append(ProfileRow(int(gid), int(sel.sum()), float(pp.mean()), float(yy.mean()), score))
    return ProfileReport(rows)


def write_json(path, obj):
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    elif hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, (frozenset, set)):
        return sorted(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")
