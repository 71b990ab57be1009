"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every op builds a node holding the forward value and a closure that routes the
incoming gradient to its parents; `backward` walks the graph once in reverse
topological order.  Small convolutions ride on strided window views contracted
with `tensordot`; large float32 ones switch to an FFT path so the heavy lifting
stays inside BLAS / pocketfft.

Conventions: batched signals are [batch, channels, length]; dense activations
are [batch, features].  Dropout draws from a counter-based Philox stream keyed
by (seed, layer id, step), which makes training trajectories replayable
without carrying generator state around.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

__all__ = [
    "Tensor",
    "DimensionError",
    "GraphError",
    "no_grad",
    "conv1d",
    "dense",
    "batchnorm",
    "BatchNormState",
    "relu",
    "elu",
    "maxpool1d",
    "avgpool1d",
    "gap",
    "flatten",
    "dropout",
    "dropout_rng",
    "add",
    "softmax",
    "softmax_xent",
    "l2_penalty",
    "backward",
    "AdamState",
    "adam_step",
    "zero_grad",
    "numeric_gradient",
]


class DimensionError(ValueError):
    """Operand shapes cannot be combined by the requested op."""


class GraphError(RuntimeError):
    """The autodiff graph was used outside its contract."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.data.shape}, dtype={self.data.dtype})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make_node(data, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    """Wrap an op result; the closure is kept only when a parent needs grads."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, op=op)
    if needs:
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # first contribution: take ownership of a dense copy instead of
        # zero-filling and adding
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# window helpers
# ---------------------------------------------------------------------------


def _window_view(x: np.ndarray, width: int, stride: int) -> np.ndarray:
    """[B, C, L] -> read-only view [B, C, L_out, width]."""
    b, c, ln = x.shape
    l_out = (ln - width) // stride + 1
    s0, s1, s2 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, c, l_out, width), (s0, s1, s2 * stride, s2), writeable=False
    )


def _same_padding(length: int, width: int, stride: int) -> tuple[int, int]:
    l_out = -(-length // stride)  # ceil
    total = max(0, (l_out - 1) * stride + width - length)
    return total // 2, total - total // 2


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def _spectral_contract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-frequency-bin matrix product: [M,K,F] x [K,N,F] -> [M,N,F].

    Staged as a batched matmul over the bin axis, which BLAS handles far
    better than a complex einsum.
    """
    at = np.ascontiguousarray(a.transpose(2, 0, 1))
    bt = np.ascontiguousarray(b.transpose(2, 0, 1))
    return np.ascontiguousarray((at @ bt).transpose(1, 2, 0))


# below this much multiply-add work the windowed path wins on overhead
_FFT_CONV_MIN_WORK = 1 << 18


def _conv1d_fft(xp, w, stride, needs_grad):
    """Frequency-domain conv: returns (out_no_bias, backward_pieces).

    Used for large float32 graphs where the im2col copies dominate; the
    windowed path stays the reference implementation and the float64 path.
    """
    bsz, c_in, lp = xp.shape
    c_out, _, width = w.shape
    n = sfft.next_fast_len(lp)
    x_f = sfft.rfft(xp, n, axis=2)
    w_f = sfft.rfft(w, n, axis=2)
    full = sfft.irfft(_spectral_contract(x_f, w_f.conj().transpose(1, 0, 2)), n, axis=2)
    l_out = (lp - width) // stride + 1
    out = np.ascontiguousarray(full[:, :, : (l_out - 1) * stride + 1 : stride])
    if not needs_grad:
        return out, None

    def backward_pieces(g, need_w, need_x):
        if stride > 1:
            gd = np.zeros((bsz, c_out, (g.shape[2] - 1) * stride + 1), g.dtype)
            gd[:, :, ::stride] = g
        else:
            gd = g
        g_f = sfft.rfft(gd, n, axis=2)
        gw = gxp = None
        if need_w:
            gw = sfft.irfft(
                _spectral_contract(g_f.conj().transpose(1, 0, 2), x_f), n, axis=2
            )[:, :, :width]
        if need_x:
            gxp = sfft.irfft(
                _spectral_contract(g_f, w_f), n, axis=2
            )[:, :, :lp]
        return gw, gxp

    return out, backward_pieces


def conv1d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: str = "same",
) -> Tensor:
    """Cross-correlation along the last axis.

    `x` is [B, C_in, L], `w` is [C_out, C_in, width]; padding is "same"
    (output length ceil(L / stride)) or "valid".
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise DimensionError(
            f"conv1d wants x [B,C,L] and w [C_out,C_in,k], got {x.shape} and {w.shape}"
        )
    bs, c_in, length = x.shape
    c_out, c_w, width = w.shape
    if c_w != c_in:
        raise DimensionError(
            f"conv1d channel mismatch: x has {c_in} channels ({x.shape}), "
            f"w expects {c_w} ({w.shape})"
        )
    if stride < 1:
        raise DimensionError(f"conv1d stride must be >= 1, got {stride}")
    if padding == "same":
        pad_lo, pad_hi = _same_padding(length, width, stride)
    elif padding == "valid":
        pad_lo = pad_hi = 0
        if width > length:
            raise DimensionError(
                f"conv1d valid padding needs width <= length, got {width} > {length}"
            )
    else:
        raise DimensionError(f"conv1d padding must be 'same' or 'valid', got {padding!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_lo, pad_hi)))
    needs_grad = _grad_enabled and (
        x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)
    )
    use_fft = (
        xp.dtype == np.float32
        and width >= 4
        and xp.size * width >= _FFT_CONV_MIN_WORK
    )

    if use_fft:
        out, bw_pieces = _conv1d_fft(xp, w.data, stride, needs_grad)
        win = None
    else:
        win = _window_view(xp, width, stride)  # [B, C_in, L_out, k]
        out = np.tensordot(win, w.data, axes=([1, 3], [1, 2]))  # [B, L_out, C_out]
        out = np.ascontiguousarray(out.transpose(0, 2, 1))
    if b is not None:
        if b.shape != (c_out,):
            raise DimensionError(
                f"conv1d bias must be shape ({c_out},), got {b.shape}"
            )
        out += b.data[:, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward_fn(g: np.ndarray) -> None:
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2)))
        if use_fft:
            gw, gxp = bw_pieces(g, w.requires_grad, x.requires_grad)
            if w.requires_grad:
                _accum(w, gw)
            if x.requires_grad:
                _accum(x, gxp[:, :, pad_lo : pad_lo + length])
            return
        l_out = g.shape[2]
        if w.requires_grad:
            # contract batch and output-position axes of g against the windows
            gw = np.tensordot(g, win, axes=([0, 2], [0, 2]))  # [C_out, C_in, k]
            _accum(w, gw)
        if x.requires_grad:
            # transposed conv as one correlation: dilate g by the stride, pad
            # by k-1, correlate with the flipped kernel
            if stride > 1:
                gd = np.zeros((g.shape[0], c_out, (l_out - 1) * stride + 1), g.dtype)
                gd[:, :, ::stride] = g
            else:
                gd = g
            gp = np.pad(gd, ((0, 0), (0, 0), (width - 1, width - 1)))
            gwin = _window_view(gp, width, 1)  # [B, C_out, Ld+k-1, k]
            w_flip = w.data[:, :, ::-1]
            full = np.tensordot(gwin, w_flip, axes=([1, 3], [0, 2]))  # [B, L, C_in]
            gxp = np.zeros_like(xp)
            n_full = full.shape[1]
            gxp[:, :, :n_full] = full.transpose(0, 2, 1)
            _accum(x, gxp[:, :, pad_lo : pad_lo + length])

    return _make_node(out, parents, "conv1d", backward_fn)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map: [B, D] @ [D, M] (+ bias)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"dense wants x [B,D] and w [D,M] with matching D, got {x.shape} and {w.shape}"
        )
    out = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"dense bias must be shape ({w.shape[1]},), got {b.shape}")
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            _accum(w, x.data.T @ g)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _make_node(out, parents, "dense", backward_fn)


@dataclass
class BatchNormState:
    """Running statistics carried across steps (not part of the graph)."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def for_channels(cls, c: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(c, dtype=dtype), np.ones(c, dtype=dtype))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy())


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize over all axes except channel (axis 1); biased batch variance.

    In training mode the batch statistics are used and the running statistics
    are updated in place; in eval mode the stored statistics are used, so two
    eval passes over the same data are side-effect free and bitwise equal.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batchnorm gamma/beta must be shape ({c},), got {gamma.shape} and {beta.shape}"
        )
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mean
        state.running_var[...] = (1 - momentum) * state.running_var + momentum * var
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    n_red = x.data.size // c

    def backward_fn(g: np.ndarray) -> None:
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = gxhat.sum(axis=axes)
                s2 = (gxhat * xhat).sum(axis=axes)
                gx = (
                    gxhat
                    - (s1.reshape(bshape) + xhat * s2.reshape(bshape)) / n_red
                ) * inv.reshape(bshape)
                _accum(x, gx)
            else:
                _accum(x, gxhat * inv.reshape(bshape))

    return _make_node(out, (x, gamma, beta), "batchnorm", backward_fn)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    keep = x.data > 0
    out = np.where(keep, x.data, 0.0).astype(x.dtype, copy=False)

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, g * keep)

    return _make_node(out, (x,), "relu", backward_fn)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    x = _as_tensor(x)
    neg = x.data <= 0
    out = np.where(neg, alpha * np.expm1(np.minimum(x.data, 0.0)), x.data)
    out = out.astype(x.dtype, copy=False)

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, g * np.where(neg, out + alpha, 1.0))

    return _make_node(out, (x,), "elu", backward_fn)


def _pool_prep(x: Tensor, width: int, stride: int, op: str):
    if x.data.ndim != 3:
        raise DimensionError(f"{op} wants [B,C,L], got {x.shape}")
    if width < 1 or stride < 1:
        raise DimensionError(f"{op} width and stride must be >= 1")
    if width > x.shape[2]:
        raise DimensionError(
            f"{op} window {width} exceeds signal length {x.shape[2]} (shape {x.shape})"
        )
    return _window_view(x.data, width, stride)


def maxpool1d(x: Tensor, width: int = 2, stride: int = 2) -> Tensor:
    x = _as_tensor(x)
    win = _pool_prep(x, width, stride, "maxpool1d")
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    b, c, l_out = out.shape

    def backward_fn(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data).reshape(b * c, x.shape[2])
        cols = (np.arange(l_out) * stride)[None, :] + idx.reshape(b * c, l_out)
        rows = np.repeat(np.arange(b * c)[:, None], l_out, axis=1)
        np.add.at(gx, (rows, cols), g.reshape(b * c, l_out))
        _accum(x, gx.reshape(x.shape))

    return _make_node(out, (x,), "maxpool1d", backward_fn)


def avgpool1d(x: Tensor, width: int = 2, stride: int = 2) -> Tensor:
    x = _as_tensor(x)
    win = _pool_prep(x, width, stride, "avgpool1d")
    out = win.mean(axis=3)
    b, c, l_out = out.shape

    def backward_fn(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data).reshape(b * c, x.shape[2])
        share = (g / width).reshape(b * c, l_out)
        base = np.arange(l_out) * stride
        for kk in range(width):
            np.add.at(
                gx,
                (np.arange(b * c)[:, None], (base + kk)[None, :]),
                share,
            )
        _accum(x, gx.reshape(x.shape))

    return _make_node(out, (x,), "avgpool1d", backward_fn)


def gap(x: Tensor) -> Tensor:
    """Global average pool: [B, C, L] -> [B, C]."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"gap wants [B,C,L], got {x.shape}")
    length = x.shape[2]
    out = x.data.mean(axis=2)

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, np.repeat(g[:, :, None], length, axis=2) / length)

    return _make_node(out, (x,), "gap", backward_fn)


def flatten(x: Tensor) -> Tensor:
    """[B, ...] -> [B, prod(...)]."""
    x = _as_tensor(x)
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, g.reshape(shape))

    return _make_node(out, (x,), "flatten", backward_fn)


def dropout_rng(seed: int, layer_id: int, step: int) -> np.random.Generator:
    """Counter-based stream for one dropout layer at one step."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence((seed, layer_id, step)))
    )


def dropout(
    x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None
) -> Tensor:
    """Inverted dropout; identity when rate is 0 or in eval mode."""
    x = _as_tensor(x)
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng stream")
    draw_dtype = np.float32 if x.dtype == np.float32 else np.float64
    r = rng.random(x.shape, dtype=draw_dtype)
    scale = x.dtype.type(1.0 / (1.0 - rate))
    mask = np.where(r >= rate, scale, x.dtype.type(0))
    out = x.data * mask

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, g * mask)

    return _make_node(out, (x,), "dropout", backward_fn)


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (residual join)."""
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise DimensionError(f"add wants matching shapes, got {x.shape} and {y.shape}")
    out = x.data + y.data

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, g)
        _accum(y, g)

    return _make_node(out, (x, y), "add", backward_fn)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax on a plain array (inference helper)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy over the batch; returns (loss, probabilities)."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_xent wants logits [B,K], got {logits.shape}")
    labels = np.asarray(labels)
    bs, k = logits.shape
    if labels.shape != (bs,):
        raise ValueError(f"labels must be shape ({bs},), got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(
            f"labels must lie in [0, {k}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    loss = -logp[np.arange(bs), labels].mean()

    def backward_fn(g: np.ndarray) -> None:
        if logits.requires_grad:
            gz = probs.copy()
            gz[np.arange(bs), labels] -= 1.0
            _accum(logits, g * gz / bs)

    node = _make_node(
        np.asarray(loss, dtype=logits.dtype), (logits,), "softmax_xent", backward_fn
    )
    return node, probs


def l2_penalty(params: list[Tensor], factor: float) -> Tensor:
    """factor * sum of squared entries over the given tensors."""
    params = [_as_tensor(p) for p in params]
    total = sum(float(np.sum(p.data.astype(np.float64) ** 2)) for p in params)
    dtype = params[0].dtype if params else np.float64

    def backward_fn(g: np.ndarray) -> None:
        for p in params:
            _accum(p, g * 2.0 * factor * p.data)

    return _make_node(
        np.asarray(factor * total, dtype=dtype), tuple(params), "l2_penalty", backward_fn
    )


# ---------------------------------------------------------------------------
# graph traversal and optimization
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad over the whole graph."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = {id(loss)}
    stack: list[tuple[Tensor, int]] = [(loss, 0)]
    while stack:
        node, i = stack.pop()
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if id(parent) not in seen and parent._backward is not None:
                seen.add(id(parent))
                stack.append((parent, 0))
        else:
            order.append(node)

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter."""

    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(
    params: list[Tensor],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update in place; missing grads count as zero."""
    if len(state.m) != len(params):
        raise ValueError(
            f"optimizer state holds {len(state.m)} slots for {len(params)} params"
        )
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m[...] = beta1 * m + (1 - beta1) * g
        v[...] = beta2 * v + (1 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# finite differences (test harness support)
# ---------------------------------------------------------------------------


def numeric_gradient(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return out
