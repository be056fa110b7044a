"""Minimal reverse-mode automatic differentiation on dense numpy arrays.

Only the operators needed by the separation network and the assignment
losses are provided. Elementwise ops follow numpy broadcasting; gradients
are summed back to the operand shapes.

Feature tensors use the layout ``(..., features, frames)``: ``dense`` and
``feature_norm`` act on axis -2, convolutions and framing act on axis -1.
"""

from __future__ import annotations

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "dilated_conv1d",
    "dense",
    "relu",
    "sigmoid",
    "concat",
    "mean",
    "sum",
    "square",
    "log10",
    "feature_norm",
    "reshape",
    "expand",
    "overlap_add",
    "NORM_EPS",
]

NORM_EPS = 1e-8
_SUPPORTED = (np.float32, np.float64)
_debug = False


def set_debug(enabled: bool) -> None:
    """Check every forward result for NaN/Inf when enabled."""
    global _debug
    _debug = bool(enabled)


class Tensor:
    """A node in the computation graph.

    ``data`` is never modified in place after construction. ``grad`` is
    filled by :func:`backward` for tensors with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data)
        if arr.dtype not in _SUPPORTED:
            if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
                arr = arr.astype(np.float64)
            else:
                raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    arr = np.array(data, dtype=dtype if dtype is not None else None)
    if dtype is None and arr.dtype not in _SUPPORTED:
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad)


def _as_tensor(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn, op) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a Python scalar."""
    factor = float(factor)

    def bw(g):
        return (g * factor,)

    return _make(a.data * a.data.dtype.type(factor), (a,), bw, "scale")


def square(a: Tensor) -> Tensor:
    def bw(g):
        return (2.0 * g * a.data,)

    return _make(a.data * a.data, (a,), bw, "square")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bw(g):
        return (g * (a.data > 0),)

    return _make(out, (a,), bw, "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bw, "sigmoid")


def log10(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise FloatingPointError("log10 of non-positive value")
    inv_ln10 = 1.0 / np.log(10.0)

    def bw(g):
        return (g * inv_ln10 / a.data,)

    return _make(np.log10(a.data), (a,), bw, "log10")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "mean")


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and t.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, tuple(tensors), bw, "concat")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bw, "reshape")


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast to ``shape``; the backward pass sums over repeated axes."""
    out = np.broadcast_to(a.data, shape)

    def bw(g):
        return (_unbroadcast(g, a.shape),)

    return _make(np.ascontiguousarray(out), (a,), bw, "expand")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise linear map over the feature axis.

    ``x`` has shape ``(..., D_in, L)``, ``weight`` ``(D_out, D_in)`` and
    ``bias`` ``(D_out,)``. Returns ``(..., D_out, L)``.
    """
    x = _as_tensor(x)
    if weight.data.ndim != 2 or x.shape[-2] != weight.shape[1]:
        raise ValueError(f"dense: weight {weight.shape} does not fit input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"dense: bias {bias.shape} does not fit weight {weight.shape}")
    out = np.matmul(weight.data, x.data)
    if bias is not None:
        out = out + bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = np.matmul(weight.data.T, g) if x.requires_grad else None
        lead = g.shape[:-2]
        g2 = g.reshape(-1, g.shape[-2], g.shape[-1])
        x2 = np.broadcast_to(x.data, lead + x.shape[-2:]).reshape(-1, x.shape[-2], x.shape[-1])
        gw = np.matmul(g2, np.swapaxes(x2, -1, -2)).sum(axis=0)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    return _make(out, parents, bw, "dense")


def dilated_conv1d(x: Tensor, kernel: Tensor, dilation: int = 1, padding="same") -> Tensor:
    """Depthwise dilated 1-D convolution (cross-correlation) over the last axis.

    ``x`` has shape ``(..., H, L)`` and ``kernel`` ``(H, k)``; each feature row
    is filtered by its own kernel row. ``padding="same"`` zero-pads
    ``(k - 1) * dilation // 2`` samples on each side (odd ``k`` keeps ``L``);
    an integer pads that many samples on each side.
    """
    x = _as_tensor(x)
    if dilation < 1:
        raise ValueError("dilated_conv1d: dilation must be >= 1")
    if kernel.data.ndim != 2 or kernel.shape[0] != x.shape[-2]:
        raise ValueError(f"dilated_conv1d: kernel {kernel.shape} does not fit input {x.shape}")
    width = kernel.shape[1]
    if padding == "same":
        if width % 2 == 0:
            raise ValueError("dilated_conv1d: 'same' padding needs an odd kernel width")
        pad = (width - 1) * dilation // 2
    else:
        pad = int(padding)
    length = x.shape[-1]
    out_len = length + 2 * pad - (width - 1) * dilation
    if out_len < 1:
        raise ValueError("dilated_conv1d: input too short for kernel and dilation")
    widths = [(0, 0)] * (x.data.ndim - 1) + [(pad, pad)]
    xp = np.pad(x.data, widths)
    kd = kernel.data
    out = np.zeros(x.shape[:-1] + (out_len,), dtype=np.result_type(x.data, kd))
    for j in range(width):
        s = j * dilation
        out += kd[:, j : j + 1] * xp[..., s : s + out_len]

    def bw(g):
        g3 = g.reshape(-1, g.shape[-2], out_len)
        xp3 = xp.reshape(-1, xp.shape[-2], xp.shape[-1])
        gxp = np.zeros_like(xp3)
        gk = np.empty_like(kd)
        for j in range(width):
            s = j * dilation
            gxp[..., s : s + out_len] += kd[:, j : j + 1] * g3
            gk[:, j] = np.einsum("bhl,bhl->h", g3, xp3[..., s : s + out_len])
        gx = gxp[..., pad : pad + length].reshape(x.shape)
        return gx, gk

    return _make(out, (x, kernel), bw, "dilated_conv1d")


def feature_norm(x: Tensor, scale_: Tensor, bias: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalise each frame over the feature axis, then apply a per-feature affine.

    ``x`` is ``(..., K, L)``; ``scale_`` and ``bias`` are ``(K,)``.
    """
    x = _as_tensor(x)
    k = x.shape[-2]
    if scale_.shape != (k,) or bias.shape != (k,):
        raise ValueError(f"feature_norm: affine shapes {scale_.shape}/{bias.shape} need ({k},)")
    mu = x.data.mean(axis=-2, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gam = scale_.data[:, None]
    out = xhat * gam + bias.data[:, None]

    def bw(g):
        gs = (g * xhat).reshape(-1, k, x.shape[-1]).sum(axis=(0, 2))
        gb = g.reshape(-1, k, x.shape[-1]).sum(axis=(0, 2))
        gh = g * gam
        gx = inv * (gh - gh.mean(axis=-2, keepdims=True) - xhat * (gh * xhat).mean(axis=-2, keepdims=True))
        return gx, gs, gb

    return _make(out, (x, scale_, bias), bw, "feature_norm")


def overlap_add(frames: Tensor, hop: int, length: int) -> Tensor:
    """Overlap-add ``(..., W, L)`` frames with hop ``hop`` into ``(..., length)``.

    The full reconstruction of ``(L - 1) * hop + W`` samples is cropped or
    zero-padded to ``length``.
    """
    frames = _as_tensor(frames)
    win, n_frames = frames.shape[-2], frames.shape[-1]
    full = (n_frames - 1) * hop + win
    lead = frames.shape[:-2]
    buf = np.zeros(lead + (max(full, length),), dtype=frames.dtype)
    fd = frames.data
    # hop divides the window, so add frames in win // hop interleaved groups
    if win % hop == 0:
        r = win // hop
        for q in range(r):
            seg = fd[..., q * hop : (q + 1) * hop, :]  # (..., hop, L)
            seg = np.swapaxes(seg, -1, -2).reshape(lead + (n_frames * hop,))
            buf[..., q * hop : q * hop + n_frames * hop] += seg
    else:
        for l in range(n_frames):
            buf[..., l * hop : l * hop + win] += fd[..., :, l]
    out = buf[..., :length].copy()

    def bw(g):
        gbuf = np.zeros(lead + (max(full, length),), dtype=g.dtype)
        gbuf[..., :length] = g
        return (frame_signal(gbuf, win, hop, n_frames),)

    return _make(out, (frames,), bw, "overlap_add")


def frame_signal(x: np.ndarray, window: int, hop: int, n_frames: int | None = None) -> np.ndarray:
    """Slice ``(..., T)`` into ``(..., window, L)`` frames (plain numpy helper)."""
    t = x.shape[-1]
    if n_frames is None:
        if t < window:
            raise ValueError(f"signal of {t} samples is shorter than one window ({window})")
        n_frames = 1 + (t - window) // hop
    view = np.lib.stride_tricks.sliding_window_view(x, window, axis=-1)[..., ::hop, :]
    return np.swapaxes(view[..., :n_frames, :], -1, -2).copy()


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None):
    """Backpropagate from the scalar ``loss``.

    Leaf tensors with ``requires_grad`` get their ``.grad`` set (previous
    values are overwritten). If ``params`` is given, returns the list of
    their gradients; parameters the loss does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss) if loss.requires_grad else []
    in_graph = {id(n) for n in order}
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is None:
        return None
    return [p.grad if id(p) in in_graph else np.zeros_like(p.data) for p in params]
