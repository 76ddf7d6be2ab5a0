"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap a numpy array plus an optional gradient buffer. Operations
executed while a :class:`Tape` is active record backward rules onto it;
``tape.backward(loss)`` then replays the rules in reverse and accumulates
gradients into every participating tensor that has ``requires_grad`` set.
Outside a tape, the same functions are plain (and cheap) numpy forwards.

Layout is row-major throughout. Broadcasting follows numpy semantics and
gradients are sum-reduced back to each operand's shape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "tensor",
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "absolute",
    "sigmoid",
    "relu",
    "silu",
    "softplus",
    "where",
    "matmul",
    "conv1d",
    "depthwise_conv1d",
    "layer_norm",
    "rms_norm",
    "softmax",
    "tsum",
    "tmean",
    "reshape",
    "swap_axes",
    "concat",
    "narrow",
    "unfold_causal",
    "pad_left",
    "dropout",
    "ssm_scan",
    "mac_counter",
    "count_macs",
]


class Tensor:
    """A dense n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars are wrapped as constants of the same dtype.
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class _TapeState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_STATE = _TapeState()


class Tape:
    """Ordered record of operations for one reverse pass.

    Nodes are appended in execution order, which is a topological order by
    construction. ``backward`` may run exactly once per tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _STATE.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _STATE.stack.pop()
        assert popped is self

    @staticmethod
    def current() -> "Tape | None":
        return _STATE.stack[-1] if _STATE.stack else None

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of every recorded tensor reachable from ``loss``."""
        if self._used:
            raise ContractError("backward was already run on this tape; build a new tape")
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            gout = node.out.grad
            if gout is None:
                continue
            grads = node.bwd(gout)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                # Never mutate gradient buffers in place: they may be shared.
                inp.grad = g if inp.grad is None else inp.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _record(out: Tensor, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    tape = Tape.current()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# MAC instrumentation (multiply-accumulate counting for the cost oracle)
# ---------------------------------------------------------------------------


class MacCounter:
    """Counts multiply-accumulates actually executed by the heavy kernels.

    Only matmul, the convolutions and the state-space scan report; pointwise
    and normalization ops do not. Enabled via the ``count_macs`` context.
    """

    def __init__(self):
        self.enabled = False
        self.total = 0

    def add(self, macs: int) -> None:
        if self.enabled:
            self.total += int(macs)


mac_counter = MacCounter()


class MacTally:
    """Running MAC total since a fixed starting point; valid after the context ends."""

    def __init__(self, start: int):
        self._start = start

    @property
    def total(self) -> int:
        return mac_counter.total - self._start


@contextmanager
def count_macs():
    prev_enabled = mac_counter.enabled
    mac_counter.enabled = True
    tally = MacTally(mac_counter.total)
    try:
        yield tally
    finally:
        mac_counter.enabled = prev_enabled


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = Tensor(e)
    return _record(out, (a,), lambda g: (g * e,))


def absolute(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: (g * s,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False))
    return _record(out, (a,), lambda g: (g * mask,))


def silu(a: Tensor) -> Tensor:
    s = sigmoid(Tensor(a.data)).data  # reuse the stable sigmoid, no recording
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * (s * (1.0 + a.data * (1.0 - s))),))


def softplus(a: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(np.zeros((), dtype=a.dtype), a.data))
    s = sigmoid(Tensor(a.data)).data
    return _record(out, (a,), lambda g: (g * s,))


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where the boolean ``mask`` holds, else ``b``.

    The mask is data, not a differentiable input; gradients route to the
    selected branch only.
    """
    _check_broadcast(a, b, "where")
    out = Tensor(np.where(mask, a.data, b.data))

    def bwd(g):
        ga = _unbroadcast(np.where(mask, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(mask, 0.0, g), b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[.., m, k] @ [.., k, n] -> [.., m, n]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions do not broadcast, {a.shape} vs {b.shape}") from None
    batch = int(np.prod(data.shape[:-2], dtype=np.int64)) if data.ndim > 2 else 1
    mac_counter.add(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    out = Tensor(data)

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def _conv_pads(kw: int, padding: str) -> tuple[int, int]:
    if padding == "causal":
        return kw - 1, 0
    if padding == "same":
        return kw // 2, kw - 1 - kw // 2
    if padding == "valid":
        return 0, 0
    raise ShapeError(f"unknown conv padding mode {padding!r}")


def conv1d(x: Tensor, kernels: Tensor, padding: str = "valid", bias: Tensor | None = None) -> Tensor:
    """Cross-correlation along the last axis.

    ``x`` is ``[.., c_in, length]``, ``kernels`` is ``[c_out, c_in, kw]``.
    ``padding`` is one of ``valid``, ``same``, ``causal`` (left pad only).
    """
    if kernels.ndim != 3:
        raise ShapeError(f"conv1d kernels must be [c_out, c_in, kw], got {kernels.shape}")
    if x.ndim < 2 or x.shape[-2] != kernels.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernels {kernels.shape}")
    kw = kernels.shape[-1]
    pl, pr = _conv_pads(kw, padding)
    length = x.shape[-1]
    if kw > length + pl + pr:
        raise ShapeError(f"conv1d: kernel width {kw} exceeds padded input length {length + pl + pr}")
    pad_spec = [(0, 0)] * (x.ndim - 1) + [(pl, pr)]
    xp = np.pad(x.data, pad_spec)
    windows = sliding_window_view(xp, kw, axis=-1)  # [.., c_in, l_out, kw]
    data = np.einsum("...itk,oik->...ot", windows, kernels.data, optimize=True)
    l_out = data.shape[-1]
    batch = int(np.prod(data.shape[:-2], dtype=np.int64)) if data.ndim > 2 else 1
    mac_counter.add(batch * kernels.shape[0] * kernels.shape[1] * kw * l_out)
    if bias is not None:
        data = data + bias.data[:, None]
    out = Tensor(data)

    def bwd(g):
        gk = np.einsum("...ot,...itk->oik", g, windows, optimize=True)
        gp = np.pad(g, [(0, 0)] * (g.ndim - 1) + [(kw - 1, kw - 1)])
        gwin = sliding_window_view(gp, kw, axis=-1)  # [.., c_out, l_pad, kw]
        kflip = kernels.data[:, :, ::-1]
        gxp = np.einsum("...osk,oik->...is", gwin, kflip, optimize=True)
        gx = gxp[..., pl : pl + length]
        gb = None
        if bias is not None:
            gb = g.sum(axis=tuple(i for i in range(g.ndim) if i != g.ndim - 2))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _record(out, inputs, bwd)


def depthwise_conv1d(x: Tensor, kernels: Tensor, padding: str = "causal", bias: Tensor | None = None) -> Tensor:
    """Per-channel cross-correlation: ``x [.., c, length]``, ``kernels [c, kw]``."""
    if kernels.ndim != 2 or x.shape[-2] != kernels.shape[0]:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} incompatible with kernels {kernels.shape}")
    kw = kernels.shape[-1]
    pl, pr = _conv_pads(kw, padding)
    length = x.shape[-1]
    if kw > length + pl + pr:
        raise ShapeError(f"depthwise_conv1d: kernel width {kw} exceeds padded length {length + pl + pr}")
    xp = np.pad(x.data, [(0, 0)] * (x.ndim - 1) + [(pl, pr)])
    windows = sliding_window_view(xp, kw, axis=-1)  # [.., c, l_out, kw]
    data = np.einsum("...ctk,ck->...ct", windows, kernels.data, optimize=True)
    l_out = data.shape[-1]
    batch = int(np.prod(data.shape[:-2], dtype=np.int64)) if data.ndim > 2 else 1
    mac_counter.add(batch * kernels.shape[0] * kw * l_out)
    if bias is not None:
        data = data + bias.data[:, None]
    out = Tensor(data)

    def bwd(g):
        gk = np.einsum("...ct,...ctk->ck", g, windows, optimize=True)
        gp = np.pad(g, [(0, 0)] * (g.ndim - 1) + [(kw - 1, kw - 1)])
        gwin = sliding_window_view(gp, kw, axis=-1)
        gxp = np.einsum("...csk,ck->...cs", gwin, kernels.data[:, ::-1], optimize=True)
        gx = gxp[..., pl : pl + length]
        gb = None
        if bias is not None:
            gb = g.sum(axis=tuple(i for i in range(g.ndim) if i != g.ndim - 2))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _record(out, inputs, bwd)


# ---------------------------------------------------------------------------
# Normalization and softmax
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g):
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        gh = g * gain.data
        # d/dx of (x - mu) * ivar with mu, var both functions of x
        gx = ivar * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), bwd)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale rows to unit root-mean-square, then per-channel gain."""
    d = x.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True) + eps
    inv = 1.0 / np.sqrt(ms)
    xhat = x.data * inv
    out = Tensor(xhat * gain.data)

    def bwd(g):
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gh = g * gain.data
        gx = inv * (gh - x.data * ((gh * x.data).sum(axis=-1, keepdims=True) / (d * ms)))
        return gx, ggain

    return _record(out, (x, gain), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis; -inf entries get exactly zero probability."""
    m = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).astype(x.dtype, copy=False),)

    return _record(out, (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    inv = 1.0 / n

    def bwd(g):
        if axis is None:
            return ((np.broadcast_to(g, x.shape) * inv).astype(x.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(gg, x.shape) * inv).astype(x.dtype, copy=False),)

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def swap_axes(x: Tensor, a: int, b: int) -> Tensor:
    out = Tensor(np.swapaxes(x.data, a, b))
    return _record(out, (x,), lambda g: (np.swapaxes(g, a, b),))


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along one axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(x.data[idx].copy())

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _record(out, (x,), bwd)


def unfold_causal(x: Tensor, size: int, axis: int = -2) -> Tensor:
    """Causal sliding windows over one axis, keeping the trailing feature axis.

    For ``x [.., T, F]`` (axis=-2) returns ``[.., T, size, F]`` where window
    ``s`` of row ``t`` is position ``t - size + 1 + s``, zero-padded when that
    is negative.
    """
    if axis != -2:
        raise ShapeError("unfold_causal currently supports axis=-2 only")
    t_len = x.shape[-2]
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(size - 1, 0), (0, 0)]
    xp = np.pad(x.data, pad_spec)
    win = sliding_window_view(xp, size, axis=-2)  # [.., T, F, size]
    out = Tensor(np.ascontiguousarray(np.swapaxes(win, -1, -2)))

    def bwd(g):
        gxp = np.zeros_like(xp)
        for s in range(size):
            gxp[..., s : s + t_len, :] += g[..., :, s, :]
        return (gxp[..., size - 1 :, :],)

    return _record(out, (x,), bwd)


def pad_left(x: Tensor, n: int, mode: str = "edge") -> Tensor:
    """Pad the last axis on the left, by edge replication or zeros."""
    if n < 0:
        raise ShapeError(f"pad_left: negative pad {n}")
    if n == 0:
        return x
    pad_spec = [(0, 0)] * (x.ndim - 1) + [(n, 0)]
    data = np.pad(x.data, pad_spec, mode="edge" if mode == "edge" else "constant")
    out = Tensor(data)

    def bwd(g):
        gx = g[..., n:].copy()
        if mode == "edge":
            gx[..., 0] = gx[..., 0] + g[..., :n].sum(axis=-1)
        return (gx,)

    return _record(out, (x,), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; caller controls training/eval by simply not calling it."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    scale = 1.0 / (1.0 - rate)
    out = Tensor(x.data * keep * scale)
    return _record(out, (x,), lambda g: (g * keep * scale,))


# ---------------------------------------------------------------------------
# State-space recurrence (fused sequential kernel)
# ---------------------------------------------------------------------------


def ssm_scan(abar: Tensor, bx: Tensor, c_seq: Tensor, u: Tensor, d_skip: Tensor) -> Tensor:
    """Run the linear recurrence ``h_t = abar_t * h_{t-1} + bx_t``,
    ``y_t = sum_s h_t[:, s] * c_t[s] + d * u_t``.

    Shapes: ``abar, bx [.., T, C, S]``, ``c_seq [.., T, S]``, ``u [.., T, C]``,
    ``d_skip [C]``. The loop over ``T`` is sequential; everything else is
    vectorized. Raises :class:`NumericError` with the step index if the state
    goes non-finite.
    """
    if abar.shape != bx.shape:
        raise ShapeError(f"ssm_scan: abar {abar.shape} and bx {bx.shape} differ")
    t_len, n_ch, n_state = abar.shape[-3], abar.shape[-2], abar.shape[-1]
    ad, bd, cd, ud = abar.data, bx.data, c_seq.data, u.data
    h = np.zeros(ad.shape[:-3] + (n_ch, n_state), dtype=ad.dtype)
    hs = np.empty_like(ad)  # h after each step, saved for backward
    y = np.empty_like(ud)
    for t in range(t_len):
        h = ad[..., t, :, :] * h + bd[..., t, :, :]
        if not np.all(np.isfinite(h)):
            raise NumericError(f"ssm_scan: non-finite state at step {t}")
        hs[..., t, :, :] = h
        y[..., t, :] = (h * cd[..., t, None, :]).sum(axis=-1)
    y = y + d_skip.data * ud
    batch = int(np.prod(ad.shape[:-3], dtype=np.int64)) if ad.ndim > 3 else 1
    mac_counter.add(batch * t_len * (2 * n_ch * n_state + n_ch))
    out = Tensor(y)

    def bwd(g):
        gabar = np.empty_like(ad)
        gbx = np.empty_like(bd)
        gc = np.empty_like(cd)
        gu = g * d_skip.data
        axes = tuple(range(g.ndim - 1))
        gd = (g * ud).sum(axis=axes)
        dh = np.zeros_like(h)
        for t in range(t_len - 1, -1, -1):
            dh = dh + g[..., t, :, None] * cd[..., t, None, :]
            gc[..., t, :] = (g[..., t, :, None] * hs[..., t, :, :]).sum(axis=-2)
            h_prev = hs[..., t - 1, :, :] if t > 0 else np.zeros_like(h)
            gabar[..., t, :, :] = dh * h_prev
            gbx[..., t, :, :] = dh
            dh = dh * ad[..., t, :, :]
        return gabar, gbx, gc, gu, gd

    return _record(out, (abar, bx, c_seq, u, d_skip), bwd)
