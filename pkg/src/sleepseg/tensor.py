"""Dense tensors with reverse-mode autodiff and the 1D ops the segmentation nets are built from.

Data layout is (batch, length, channels) for all signal ops; 2D inputs
(length, channels) are accepted and returned at the same rank. float32 is
the working precision, float64 is supported end to end for gradient checks.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """An op parameter is out of its valid range."""


class InsufficientLengthError(ValueError):
    """Input is shorter than the op requires."""


class AlignmentError(ValueError):
    """Skip connection shorter than the decoder path it must feed."""


class UninitializedStatisticsError(RuntimeError):
    """Inference-mode batch norm used before any running statistics exist."""


_grad_enabled = True
_finite_checks = False


@contextmanager
def no_grad():
    """Disable graph construction; forward results carry no tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(enabled: bool) -> None:
    """Verify every op output is finite (slow; meant for tests/debugging)."""
    global _finite_checks
    _finite_checks = enabled


class Tensor:
    """N-d float array that can participate in a reverse-mode gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_prev", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this node through the recorded tape."""
        if grad is None:
            if self.data.size != 1:
                raise ParameterError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != output shape {self.data.shape}")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))

        self.accumulate_grad(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def make_node(data, parents, backward, name=None):
    """Create an op output; records the tape edge unless grads are off."""
    if _finite_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {name or 'op'}")
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, name=name)
    if requires:
        out._prev = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _as_batched(x: Tensor):
    """View tensor data as (B, L, C); report whether a batch axis was added."""
    if x.data.ndim == 3:
        return x.data, True
    if x.data.ndim == 2:
        return x.data[None], False
    raise DimensionError(f"expected (L, C) or (B, L, C), got shape {x.data.shape}")


def _debatch(arr, batched):
    return arr if batched else arr[0]


def _rebatch(grad, batched):
    """Lift an incoming output gradient back to (B, L, C)."""
    return grad if batched else grad[None]


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    """Weights and geometry of one 1D convolution.

    kernel is (width, in_channels, out_channels); effective width under
    dilation is (width - 1) * dilation + 1.
    """

    kernel: Tensor
    bias: Tensor | None = None
    dilation: int = 1
    padding_mode: str = "same"

    @property
    def effective_width(self) -> int:
        return (self.kernel.shape[0] - 1) * self.dilation + 1


_ONES_CACHE: dict = {}


def _ones(n: int, dtype) -> np.ndarray:
    """Cached all-ones vectors: column sums as BLAS matrix-vector products
    run an order of magnitude faster than ufunc reductions here."""
    key = (n, np.dtype(dtype).str)
    vec = _ONES_CACHE.get(key)
    if vec is None:
        vec = np.ones(n, dtype=dtype)
        _ONES_CACHE[key] = vec
    return vec


def _colsum(arr2d: np.ndarray) -> np.ndarray:
    return arr2d.T @ _ones(arr2d.shape[0], arr2d.dtype)


def conv1d(x: Tensor, p: ConvParams) -> Tensor:
    """1D convolution (cross-correlation) along the length axis.

    Same padding is symmetric with the extra zero on the right; valid
    padding shrinks the length by (effective width - 1). One batched matmul
    per kernel tap; per-record results are independent of batch size.
    """
    if p.dilation < 1:
        raise ParameterError(f"dilation must be >= 1, got {p.dilation}")
    if p.padding_mode not in ("same", "valid"):
        raise ParameterError(f"unknown padding mode {p.padding_mode!r}")
    xd, batched = _as_batched(x)
    w, cin, cout = p.kernel.shape
    if xd.shape[2] != cin:
        raise DimensionError(f"input has {xd.shape[2]} channels, kernel expects {cin}")
    eff = p.effective_width
    B, L, _ = xd.shape

    if p.padding_mode == "same":
        left = (eff - 1) // 2
        if eff > 1:
            xp = np.zeros((B, L + eff - 1, cin), dtype=xd.dtype)
            xp[:, left:left + L] = xd
        else:
            xp = xd
        lout = L
    else:
        if L < eff:
            raise InsufficientLengthError(f"valid conv needs length >= {eff}, got {L}")
        left = 0
        xp = xd
        lout = L - eff + 1

    kd = p.kernel.data
    dil = p.dilation
    y = np.matmul(xp[:, :lout, :], kd[0])
    if w > 1:
        scratch = np.empty_like(y)
        for m in range(1, w):
            off = m * dil
            np.matmul(xp[:, off:off + lout, :], kd[m], out=scratch)
            y += scratch
    if p.bias is not None:
        y += p.bias.data

    parents = [x, p.kernel] + ([p.bias] if p.bias is not None else [])
    kernel, bias = p.kernel, p.bias

    def backward(gy):
        gy = _rebatch(gy, batched)
        if kernel.requires_grad:
            gk = np.zeros_like(kd)
            for m in range(w):
                off = m * dil
                for b in range(B):
                    gk[m] += xp[b, off:off + lout, :].T @ gy[b]
            kernel.accumulate_grad(gk)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(_colsum(gy.reshape(-1, cout)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            scratch = np.empty((B, lout, cin), dtype=gy.dtype)
            for m in range(w):
                off = m * dil
                np.matmul(gy, kd[m].T, out=scratch)
                gxp[:, off:off + lout, :] += scratch
            gx = gxp[:, left:left + L, :] if gxp.shape[1] != L else gxp
            x.accumulate_grad(_debatch(gx, batched))

    return make_node(_debatch(y, batched), parents, backward, name="conv1d")


# ---------------------------------------------------------------------------
# pooling / resampling along the length axis


def max_pool1d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling; a trailing remainder shorter than the
    window is discarded. Ties route the gradient to the first maximum."""
    if window <= 0:
        raise ParameterError(f"pool window must be positive, got {window}")
    xd, batched = _as_batched(x)
    B, L, C = xd.shape
    if L < window:
        raise InsufficientLengthError(f"max pool window {window} exceeds length {L}")
    n = L // window
    blocks = xd[:, :n * window, :].reshape(B, n, window, C)
    idx = blocks.argmax(axis=2)
    y = np.take_along_axis(blocks, idx[:, :, None, :], axis=2)[:, :, 0, :]

    def backward(gy):
        if x.requires_grad:
            gy = _rebatch(gy, batched)
            gb = np.zeros_like(blocks)
            np.put_along_axis(gb, idx[:, :, None, :], gy[:, :, None, :], axis=2)
            gx = np.zeros_like(xd)
            gx[:, :n * window, :] = gb.reshape(B, n * window, C)
            x.accumulate_grad(_debatch(gx, batched))

    return make_node(_debatch(y, batched), [x], backward, name="max_pool1d")


def avg_pool1d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Mean pooling along length; stride defaults to the window (non-overlapping)."""
    if window <= 0:
        raise ParameterError(f"pool window must be positive, got {window}")
    stride = window if stride is None else stride
    if stride <= 0:
        raise ParameterError(f"stride must be positive, got {stride}")
    xd, batched = _as_batched(x)
    B, L, C = xd.shape
    if L < window:
        raise InsufficientLengthError(f"avg pool window {window} exceeds length {L}")

    # float64 accumulation keeps the mean of a window of identical values
    # bit-exact, so avg_pool1d(f, f) inverts upsample_nearest(f) exactly
    if stride == window:
        n = L // window
        y = xd[:, :n * window, :].reshape(B, n, window, C).mean(axis=2, dtype=np.float64).astype(xd.dtype)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xd, window, axis=1)
        y = win[:, ::stride].mean(axis=3, dtype=np.float64).astype(xd.dtype)
        n = y.shape[1]

    def backward(gy):
        if x.requires_grad:
            gy = _rebatch(gy, batched)
            gx = np.zeros_like(xd)
            g = gy / window
            if stride == window:
                gx[:, :n * window, :] = np.repeat(g, window, axis=1)
            else:
                for k in range(window):
                    gx[:, k:k + (n - 1) * stride + 1:stride, :] += g
            x.accumulate_grad(_debatch(gx, batched))

    return make_node(_debatch(y, batched), [x], backward, name="avg_pool1d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each sample `factor` times along the length axis."""
    if factor < 1:
        raise ParameterError(f"upsample factor must be >= 1, got {factor}")
    xd, batched = _as_batched(x)
    B, L, C = xd.shape
    y = np.repeat(xd, factor, axis=1)

    def backward(gy):
        if x.requires_grad:
            gy = _rebatch(gy, batched)
            x.accumulate_grad(_debatch(gy.reshape(B, L, factor, C).sum(axis=2), batched))

    return make_node(_debatch(y, batched), [x], backward, name="upsample_nearest")


def zero_pad_end(x: Tensor, target: int) -> Tensor:
    """Append zeros along the length axis up to `target` samples."""
    xd, batched = _as_batched(x)
    B, L, C = xd.shape
    if target < L:
        raise ParameterError(f"pad target {target} shorter than input length {L}")
    if target == L:
        y = xd
    else:
        y = np.zeros((B, target, C), dtype=xd.dtype)
        y[:, :L] = xd

    def backward(gy):
        if x.requires_grad:
            x.accumulate_grad(_debatch(_rebatch(gy, batched)[:, :L, :], batched))

    return make_node(_debatch(y, batched), [x], backward, name="zero_pad_end")


def crop_concat(enc: Tensor, dec: Tensor) -> Tensor:
    """Center-crop `enc` to the decoder length and concatenate after `dec`
    along channels. An odd crop removes the extra sample from the right."""
    ed, eb = _as_batched(enc)
    dd, db = _as_batched(dec)
    le, ce = ed.shape[1], ed.shape[2]
    ld, cd = dd.shape[1], dd.shape[2]
    if le < ld:
        raise AlignmentError(f"skip length {le} shorter than decoder length {ld}")
    if ed.shape[0] != dd.shape[0]:
        raise DimensionError("batch sizes differ between skip and decoder inputs")
    left = (le - ld) // 2
    y = np.concatenate([dd, ed[:, left:left + ld, :]], axis=2)

    def backward(gy):
        gy = _rebatch(gy, db)
        if dec.requires_grad:
            dec.accumulate_grad(_debatch(np.ascontiguousarray(gy[:, :, :cd]), db))
        if enc.requires_grad:
            ge = np.zeros_like(ed)
            ge[:, left:left + ld, :] = gy[:, :, cd:]
            enc.accumulate_grad(_debatch(ge, eb))

    return make_node(_debatch(y, db), [enc, dec], backward, name="crop_concat")


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Per-channel scale/shift with running statistics.

    Running stats follow r = momentum * r + (1 - momentum) * batch and stay
    out of the trainable set. `initialized` guards inference before any
    statistics exist; seed_identity() explicitly allows mean 0 / var 1.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-3
    mode: str = "train"
    initialized: bool = field(default=False)

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.99,
               epsilon: float = 1e-3, name: str | None = None) -> "BatchNormState":
        prefix = f"{name}." if name else ""
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=prefix + "gamma"),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=prefix + "beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )

    def seed_identity(self) -> "BatchNormState":
        self.running_mean[:] = 0.0
        self.running_var[:] = 1.0
        self.initialized = True
        return self


def batch_norm(x: Tensor, s: BatchNormState, mode: str | None = None) -> Tensor:
    """Normalize per channel over (batch, length).

    Train mode uses batch statistics and updates the running ones; infer
    mode is a fixed per-channel affine map from the running statistics.
    """
    mode = s.mode if mode is None else mode
    if mode not in ("train", "infer"):
        raise ParameterError(f"unknown batch norm mode {mode!r}")
    xd, batched = _as_batched(x)
    C = xd.shape[2]
    if s.gamma.shape != (C,):
        raise DimensionError(f"batch norm has {s.gamma.shape[0]} channels, input has {C}")
    eps = s.epsilon
    gd, bd = s.gamma.data, s.beta.data

    n = xd.shape[0] * xd.shape[1]
    x2 = xd.reshape(n, C)

    if mode == "train":
        mu = _colsum(x2) / n
        xhat = xd - mu
        var = np.einsum("nc,nc->c", xhat.reshape(n, C), xhat.reshape(n, C)) / n
        inv = 1.0 / np.sqrt(var + eps)
        xhat *= inv
        y = xhat * gd
        y += bd
        s.running_mean[:] = s.momentum * s.running_mean + (1.0 - s.momentum) * mu
        s.running_var[:] = s.momentum * s.running_var + (1.0 - s.momentum) * var
        s.initialized = True

        def backward(gy):
            gy = _rebatch(gy, batched)
            xh2 = xhat.reshape(n, C)
            s1 = _colsum(gy.reshape(n, C))
            s2 = np.einsum("nc,nc->c", gy.reshape(n, C), xh2)
            if s.gamma.requires_grad:
                s.gamma.accumulate_grad(s2)
            if s.beta.requires_grad:
                s.beta.accumulate_grad(s1)
            if x.requires_grad:
                coef = gd * inv
                gx = gy * coef
                gx += xhat * (-coef * s2 / n)
                gx += -coef * s1 / n
                x.accumulate_grad(_debatch(gx, batched))
    else:
        if not s.initialized:
            raise UninitializedStatisticsError(
                "inference-mode batch norm before any running statistics; "
                "train first, load a checkpoint, or seed_identity()")
        inv = 1.0 / np.sqrt(s.running_var + eps)
        scale = gd * inv
        shift = bd - s.running_mean * scale
        y = xd * scale
        y += shift

        def backward(gy):
            gy = _rebatch(gy, batched)
            if s.gamma.requires_grad or s.beta.requires_grad:
                s1 = _colsum(gy.reshape(n, C))
                s2 = np.einsum("nc,nc->c", gy.reshape(n, C), x2) - s.running_mean * s1
                if s.gamma.requires_grad:
                    s.gamma.accumulate_grad(s2 * inv)
                if s.beta.requires_grad:
                    s.beta.accumulate_grad(s1)
            if x.requires_grad:
                x.accumulate_grad(_debatch(gy * (gd * inv), batched))

    return make_node(_debatch(y, batched), [x, s.gamma, s.beta], backward, name="batch_norm")


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def backward(gy):
        if x.requires_grad:
            x.accumulate_grad(gy * (x.data > 0))

    return make_node(y, [x], backward, name="relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(gy):
        if x.requires_grad:
            x.accumulate_grad(gy * (1.0 - y * y))

    return make_node(y, [x], backward, name="tanh")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Probability-normalize along `axis` with max-subtraction stabilization."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(gy):
        if x.requires_grad:
            dot = (gy * y).sum(axis=axis, keepdims=True)
            x.accumulate_grad(y * (gy - dot))

    return make_node(y, [x], backward, name="softmax")
