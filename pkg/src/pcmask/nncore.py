"""Dense regressor engine: forward pass, hand-written backprop, ADAM, LR decay.

Conventions
-----------
A batch is an ``(N, d)`` float64 array. A layer maps ``a -> a @ W.T + b`` with
``W`` of shape ``(out, in)``. Layer indices used in error messages count the
input kernel as 0 (pre-mask only), hidden layers from 1, and the output layer
last.

Parameter order, shared by gradients, optimizer state and checkpoints::

    [input_kernel.W, input_kernel.b]   # pre-mask mode only
    hidden[0].W, hidden[0].b, ..., output.W, output.b
"""

import copy
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from pcmask import kernels
from pcmask.errors import FormatError, ModeError, NumericError, ShapeError
from pcmask.masks import BinaryMask

DEFAULT_HIDDEN = (256,) * 9
DEFAULT_SLOPE = 0.3


class Mode(str, Enum):
    PREMASK = "premask"
    MASK = "mask"


def leaky_relu(x, slope):
    if not 0.0 < slope < 1.0:
        raise ValueError("slope must lie in (0, 1)")
    return x if x >= 0 else slope * x


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    slope: float | None = None  # None means a linear layer

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias of length {self.bias.shape} does not match weights {self.weights.shape}"
            )
        if self.slope is not None and not 0.0 < self.slope < 1.0:
            raise ValueError("leaky ReLU slope must lie in (0, 1)")

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def n_out(self):
        return self.weights.shape[0]


@dataclass
class Network:
    mode: Mode
    hidden: list
    output: DenseLayer
    input_kernel: DenseLayer | None = None
    mask: BinaryMask | None = None

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.mode is Mode.PREMASK:
            if self.input_kernel is None or self.mask is not None:
                raise ModeError("pre-mask network needs an input kernel and no mask")
            if self.input_kernel.n_in != self.input_kernel.n_out:
                raise ShapeError("input kernel must be square")
            if self.input_kernel.slope is not None:
                raise ValueError("input kernel must be linear")
        else:
            if self.mask is None or self.input_kernel is not None:
                raise ModeError("mask network needs a mask and no input kernel")
        width = self.d
        for layer in [*self.hidden, self.output]:
            if layer.n_in != width:
                raise ShapeError(f"layer expects {layer.n_in} inputs, previous emits {width}")
            width = layer.n_out
        if self.output.n_out != 1 or self.output.slope is not None:
            raise ShapeError("output layer must be linear with a single unit")

    @property
    def d(self):
        if self.mode is Mode.PREMASK:
            return self.input_kernel.n_in
        return len(self.mask)

    @property
    def layers(self):
        head = [self.input_kernel] if self.mode is Mode.PREMASK else []
        return head + list(self.hidden) + [self.output]

    def parameters(self):
        """Live references to every trainable array, in canonical order."""
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def n_params(self):
        return sum(p.size for p in self.parameters())

    def copy(self):
        return copy.deepcopy(self)

    def predict(self, X, batch_size=8192):
        """Chunked inference.

        In mask mode rows that coincide after masking are evaluated once, so a
        masked-out input cannot change any output bit even across BLAS blocking
        differences between batch positions.
        """
        X = _as_batch(X, self.d)
        if self.mode is Mode.MASK:
            keep = self.mask.bits.astype(bool)
            Xm = np.where(keep, X, 0.0)
            if not keep.any():
                return np.repeat(_chunked(self, Xm[:1], batch_size), X.shape[0])
            # rows compared bytewise on the kept columns only
            kept = np.ascontiguousarray(X[:, keep])
            keys = kept.view(np.dtype((np.void, kept.dtype.itemsize * kept.shape[1]))).ravel()
            _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
            return _chunked(self, Xm[first], batch_size)[inverse.reshape(-1)]
        return _chunked(self, X, batch_size)

    def __call__(self, X):
        return self.predict(X)


def _chunked(net, X, batch_size):
    if X.shape[0] <= batch_size:
        return forward(net, X)
    return np.concatenate(
        [forward(net, X[i : i + batch_size]) for i in range(0, X.shape[0], batch_size)]
    )


def glorot_uniform(rng, n_out, n_in):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


def build_network(
    d, hidden=DEFAULT_HIDDEN, slope=DEFAULT_SLOPE, mode=Mode.PREMASK, mask=None, seed=42,
    input_init="zeros",
):
    """Glorot-uniform weights and zero biases, drawn input kernel -> hidden -> output.

    ``input_init="zeros"`` starts the input kernel at zero so its column norms
    only reflect learned input-output signal; ``"glorot"`` draws it like the
    other layers. The hidden/output draws are identical either way.
    """
    mode = Mode(mode)
    if input_init not in ("zeros", "glorot"):
        raise ValueError(f"unknown input_init {input_init!r}")
    rng = np.random.default_rng(seed)
    kernel = None
    if mode is Mode.PREMASK:
        w = glorot_uniform(rng, d, d)
        kernel = DenseLayer(w if input_init == "glorot" else np.zeros((d, d)), np.zeros(d))
    elif mask is None:
        mask = BinaryMask.ones(d)
    layers = []
    width = d
    for h in hidden:
        layers.append(DenseLayer(glorot_uniform(rng, h, width), np.zeros(h), slope))
        width = h
    out = DenseLayer(glorot_uniform(rng, 1, width), np.zeros(1))
    return Network(mode, layers, out, input_kernel=kernel, mask=mask)


def to_mask_mode(net, mask):
    """Drop the input kernel and gate inputs by ``mask``; other weights are copied."""
    if len(mask) != net.d:
        raise ShapeError(f"mask length {len(mask)} != network input size {net.d}")
    return Network(
        Mode.MASK, copy.deepcopy(net.hidden), copy.deepcopy(net.output), mask=mask
    )


def _as_batch(X, d):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != d:
        raise ShapeError(f"batch has shape {X.shape}, network expects (N, {d})")
    return X


def _forward_cache(net, X):
    X = _as_batch(X, net.d)
    if net.mode is Mode.PREMASK:
        k = net.input_kernel
        a = X @ k.weights.T + k.bias
    else:
        a = np.where(net.mask.bits.astype(bool), X, 0.0)
    first = 1
    acts = [a]
    pres = []
    # overflow is reported below as NumericError, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for i, layer in enumerate(net.hidden):
            z = a @ layer.weights.T
            a, finite = kernels.bias_act_forward(z, layer.bias, layer.slope)
            if not finite:
                raise NumericError(f"non-finite activation in layer {first + i}", layer=first + i)
            pres.append(z)
            acts.append(a)
        out = (a @ net.output.weights.T + net.output.bias).reshape(-1)
    if not np.all(np.isfinite(out)):
        idx = first + len(net.hidden)
        raise NumericError(f"non-finite activation in layer {idx}", layer=idx)
    return X, acts, pres, out


def forward(net, X):
    return _forward_cache(net, X)[3]


@dataclass(frozen=True)
class LossBreakdown:
    mse: float
    l1_penalty: float
    total: float


def l1_penalty(net, lam):
    W = net.input_kernel.weights
    return lam * np.abs(W).sum() / (W.shape[0] * W.shape[1])


def _check_targets(y, n):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != n:
        raise ShapeError(f"{y.size} targets for {n} samples")
    return y


def loss_premask(net, X, y, lam):
    if net.mode is not Mode.PREMASK:
        raise ModeError("loss_premask needs a pre-mask network")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    pred = forward(net, X)
    y = _check_targets(y, pred.size)
    mse = float(np.mean((y - pred) ** 2))
    pen = float(l1_penalty(net, lam))
    return LossBreakdown(mse, pen, mse + pen)


def loss_mask(net, X, y):
    if net.mode is not Mode.MASK:
        raise ModeError("loss_mask needs a mask-mode network")
    pred = forward(net, X)
    y = _check_targets(y, pred.size)
    mse = float(np.mean((y - pred) ** 2))
    return LossBreakdown(mse, 0.0, mse)


def loss_and_grad(net, X, y, lam=0.0):
    """Loss breakdown and gradients of its total, in parameter order."""
    if net.mode is Mode.MASK and lam != 0.0:
        raise ModeError("the sparsity penalty only exists in pre-mask mode")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    X, acts, pres, pred = _forward_cache(net, X)
    y = _check_targets(y, pred.size)
    n = pred.size
    resid = pred - y
    mse = float(np.mean(resid * resid))

    dout = (2.0 / n) * resid[:, None]
    grads = [dout.T @ acts[-1], dout.sum(axis=0)]
    delta = dout * net.output.weights  # outer product; BLAS is slow for K=1
    for i in range(len(net.hidden) - 1, -1, -1):
        layer = net.hidden[i]
        if layer.slope is not None:
            delta, dbias = kernels.leaky_relu_backward(delta, pres[i], layer.slope)
        else:
            dbias = delta.sum(axis=0)
        grads = [delta.T @ acts[i], dbias] + grads
        delta = delta @ layer.weights

    pen = 0.0
    if net.mode is Mode.PREMASK:
        W = net.input_kernel.weights
        dW = delta.T @ X
        if lam > 0.0:
            kernels.add_l1_subgradient(dW, W, lam / W.size)
        grads = [dW, delta.sum(axis=0)] + grads
        pen = float(l1_penalty(net, lam))
    return LossBreakdown(mse, pen, mse + pen), grads


def backward(net, X, y, lam=0.0):
    return loss_and_grad(net, X, y, lam)[1]


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)

    def apply(self, params, grads, lr):
        """Update ``params`` and the moments in place."""
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if len(params) != len(grads) or len(params) != len(self.m):
            raise ShapeError("parameter, gradient and state lists differ in length")
        for p, g, m in zip(params, grads, self.m):
            if p.shape != np.shape(g) or p.shape != m.shape:
                raise ShapeError(f"shape mismatch {p.shape} vs {np.shape(g)}")
        self.step += 1
        corr1 = 1.0 - self.beta1**self.step
        corr2 = 1.0 - self.beta2**self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            kernels.adam_update(
                p, np.ascontiguousarray(g, dtype=np.float64), m, v,
                lr, self.beta1, self.beta2, self.eps, corr1, corr2,
            )


def adam_step(state, params, grads, lr):
    """Functional ADAM step: returns ``(new_params, new_state)``, inputs untouched."""
    new_state = copy.deepcopy(state)
    new_params = [np.array(p, dtype=np.float64, copy=True) for p in params]
    new_state.apply(new_params, grads, lr)
    return new_params, new_state


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float = 0.001
    decay_factor: float = 5.0
    decay_every: int = 3

    def __post_init__(self):
        if self.initial_lr <= 0 or self.decay_factor <= 1 or self.decay_every < 1:
            raise ValueError("need initial_lr > 0, decay_factor > 1, decay_every >= 1")

    def at(self, epoch):
        return lr_at_epoch(self, epoch)


def lr_at_epoch(sched, epoch):
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return sched.initial_lr / sched.decay_factor ** (epoch // sched.decay_every)


# -- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"PCMCKPT\x00"
CKPT_VERSION = 1


@dataclass
class CheckpointHeader:
    version: int
    mode: Mode
    d: int
    hidden: tuple
    slopes: tuple
    seed: int
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, net, seed=42):
    """Binary checkpoint; byte layout in docs/formats.md."""
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<IBII", CKPT_VERSION, 0 if net.mode is Mode.PREMASK else 1, net.d, len(net.hidden))
    for layer in net.hidden:
        buf += struct.pack("<I", layer.n_out)
    for layer in net.hidden:
        # slope 1.0 encodes a linear layer (leaky ReLU with slope 1 is the identity)
        buf += struct.pack("<d", 1.0 if layer.slope is None else layer.slope)
    buf += struct.pack("<q", int(seed))
    if net.mode is Mode.MASK:
        buf += struct.pack("<d", float(net.mask.threshold))
        buf += net.mask.bits.astype("u1").tobytes()
    for p in net.parameters():
        buf += np.ascontiguousarray(p, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a pcmask checkpoint")
    off = 8
    try:
        version, mode_code, d, n_hidden = struct.unpack_from("<IBII", data, off)
        off += struct.calcsize("<IBII")
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        widths = struct.unpack_from(f"<{n_hidden}I", data, off)
        off += 4 * n_hidden
        slopes = struct.unpack_from(f"<{n_hidden}d", data, off)
        off += 8 * n_hidden
        (seed,) = struct.unpack_from("<q", data, off)
        off += 8
        mode = Mode.PREMASK if mode_code == 0 else Mode.MASK
        mask = None
        if mode is Mode.MASK:
            (threshold,) = struct.unpack_from("<d", data, off)
            off += 8
            bits = np.frombuffer(data, dtype="u1", count=d, offset=off).copy()
            off += d
            mask = BinaryMask(bits, threshold)

        def take(shape):
            nonlocal off
            n = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
            off += 8 * n
            return arr

        kernel = None
        if mode is Mode.PREMASK:
            kernel = DenseLayer(take((d, d)), take((d,)))
        layers = []
        width = d
        for h, s in zip(widths, slopes):
            layers.append(DenseLayer(take((h, width)), take((h,)), None if s == 1.0 else s))
            width = h
        out = DenseLayer(take((1, width)), take((1,)))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    net = Network(mode, layers, out, input_kernel=kernel, mask=mask)
    header = CheckpointHeader(version, mode, d, tuple(widths), tuple(slopes), seed)
    return net, header
