"""Dense tensors with tape-based reverse-mode autodiff, plus Adam.

Every trainable model in the package (the coordinate MLP and the
super-resolution CNN) is built from the ops in this module.  Arrays are
plain numpy buffers; a :class:`Tensor` adds the graph bookkeeping.

Spatial ops take ``(C, H, W)`` or batched ``(N, C, H, W)`` inputs.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the recorded graph (non-scalar loss, double backward)."""


# ---------------------------------------------------------------------------
# allocation accounting

class _Allocations:
    def __init__(self):
        self.live = 0
        self.peak = 0

    def add(self, nbytes: int):
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def sub(self, nbytes: int):
        self.live -= nbytes


_alloc = _Allocations()


def live_bytes() -> int:
    """Bytes currently held by tensor data and gradient buffers."""
    return _alloc.live


def peak_bytes() -> int:
    """High-water mark of :func:`live_bytes` since the last reset."""
    return _alloc.peak


def reset_peak() -> None:
    _alloc.peak = _alloc.live


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


# ---------------------------------------------------------------------------
# Tensor

class Tensor:
    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None,
                 _checked: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr)
        if not _checked:
            _finite(arr, "tensor creation")
        self.data = arr
        self._grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.name = name
        _alloc.add(arr.nbytes)

    def __del__(self):
        try:
            _alloc.sub(self.data.nbytes + (self._grad.nbytes if self._grad is not None else 0))
        except AttributeError:  # partially constructed
            pass

    @property
    def grad(self) -> np.ndarray | None:
        return self._grad

    @grad.setter
    def grad(self, value):
        old = self._grad.nbytes if self._grad is not None else 0
        if value is not None:
            value = np.ascontiguousarray(value, dtype=self.data.dtype)
            if value.shape != self.data.shape:
                raise DimensionError(f"grad shape {value.shape} != data shape {self.data.shape}")
        self._grad = value
        _alloc.sub(old)
        if value is not None:
            _alloc.add(value.nbytes)

    def zero_grad(self):
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: mul(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result; records the graph edge only when some parent needs grads."""
    out = Tensor(_finite(data, op), _checked=True)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear algebra

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    if np.isscalar(b):
        a = as_tensor(a)
        c = b
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul")
    if np.isscalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    return _make(ad @ bd, (a, b),
                 lambda g: (g @ bd.T if need_a else None, ad.T @ g if need_b else None), "matmul")


def sine(x, omega: float = 1.0) -> Tensor:
    """Elementwise ``sin(omega * x)``."""
    if not omega > 0:
        raise ValueError(f"omega must be positive, got {omega}")
    x = as_tensor(x)
    z = omega * x.data
    return _make(np.sin(z), (x,), lambda g: (g * (omega * np.cos(z)),), "sine")


sine_activation = sine


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mse_loss(prediction, target) -> Tensor:
    prediction = as_tensor(prediction)
    target = as_tensor(target, dtype=prediction.dtype)
    if prediction.shape != target.shape:
        raise DimensionError(f"mse_loss shapes {prediction.shape} and {target.shape} differ")
    diff = prediction.data - target.data
    n = diff.size
    value = np.asarray(np.mean(diff * diff), dtype=prediction.dtype)

    def bw(g):
        d = diff * (2.0 * g / n)
        return d, -d

    return _make(value, (prediction, target), bw, "mse_loss")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack ``(C_i, H, W)`` (or ``(N, C_i, H, W)``) maps along the channel axis."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_channels needs at least one input")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != len(ref) or p.shape[:-3] != ref[:-3] or p.shape[-2:] != ref[-2:]:
            raise DimensionError(f"spatial mismatch: {p.shape} vs {ref}")
    sizes = [p.shape[-3] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :, :] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=-3), parts, bw, "concat_channels")


# ---------------------------------------------------------------------------
# convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _col2im(dcol: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int,
            stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape
    dcol = dcol.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros(shape, dtype=dcol.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _batched(x: Tensor):
    if x.data.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.data.ndim != 4:
        raise DimensionError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")
    return x, False


def _unbatch(out: Tensor, squeeze: bool) -> Tensor:
    return reshape(out, out.shape[1:]) if squeeze else out


def conv2d(x, kernels, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """Zero-padded cross-correlation; kernels are ``(C_out, C_in, kh, kw)``."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride={stride} / padding={padding}")
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    if kernels.data.ndim != 4 or kernels.shape[1] != c:
        raise DimensionError(f"kernels {kernels.shape} do not match input channels {c}")
    co, _, kh, kw = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel sizes must be odd, got {kh}x{kw}")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise DimensionError(f"non-integral conv2d output size for input {h}x{w}, kernel {kh}x{kw}, "
                             f"stride {stride}, padding {padding}")
    ho, wo = span_h // stride + 1, span_w // stride + 1
    xp = np.pad(xb.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    col = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = kernels.data.reshape(co, -1)
    out = (col @ kmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    parents = [xb, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise DimensionError(f"bias shape {bias.shape} != ({co},)")
        out = out + bias.data[:, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        dk = (g2.T @ col).reshape(kernels.shape)
        dx = None
        if xb.requires_grad:
            dxp = _col2im(g2 @ kmat, xp.shape, kh, kw, stride, ho, wo)
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _unbatch(_make(out, parents, bw, "conv2d"), squeeze)


def deconv2d(x, kernels, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """Transposed convolution; kernels are ``(C_in, C_out, kh, kw)``.

    With the same kernels, stride and padding this is the adjoint of
    :func:`conv2d` read with ``kernels`` as ``(C_out_conv, C_in_conv, kh, kw)``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride={stride} / padding={padding}")
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    if kernels.data.ndim != 4 or kernels.shape[0] != c:
        raise DimensionError(f"kernels {kernels.shape} do not match input channels {c}")
    _, co, kh, kw = kernels.shape
    hp, wp = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hp - 2 * padding, wp - 2 * padding
    if ho < 1 or wo < 1:
        raise DimensionError(f"deconv2d geometry yields empty output {ho}x{wo}")
    kmat = kernels.data.reshape(c, -1)
    xd = xb.data
    cols = xd.transpose(0, 2, 3, 1).reshape(-1, c) @ kmat
    outp = _col2im(cols, (n, co, hp, wp), kh, kw, stride, h, w)
    out = outp[:, :, padding:padding + ho, padding:padding + wo]
    parents = [xb, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise DimensionError(f"bias shape {bias.shape} != ({co},)")
        out = out + bias.data[:, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        col = _im2col(gp, kh, kw, stride, h, w)
        dx = (col @ kmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2) if xb.requires_grad else None
        dk = (xd.transpose(0, 2, 3, 1).reshape(-1, c).T @ col).reshape(kernels.shape)
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _unbatch(_make(out, parents, bw, "deconv2d"), squeeze)


# ---------------------------------------------------------------------------
# reverse pass

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The graph is released afterwards; leaves must be zeroed (``zero_grad``)
    before the next backward pass reaches them.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    order = _topo(loss)
    leaves = [t for t in order if t.is_leaf]
    for leaf in leaves:
        if leaf.grad is not None:
            raise GraphError("gradient already populated; call zero_grad() before another backward")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = _finite(np.asarray(g, dtype=node.dtype), "backward")
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._consumed = True


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], beta1=0.9, beta2=0.999, epsilon=1e-8) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params],
                   0, beta1, beta2, epsilon)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(state.first_moment) or len(grads) != len(params):
        raise DimensionError("Adam state is not congruent with the parameter list")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if m.shape != p.shape:
            raise DimensionError(f"moment shape {m.shape} != parameter shape {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient passed to Adam")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 0.0015, beta1=0.9, beta2=0.999,
                 epsilon=1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.for_params(self.params, beta1, beta2, epsilon)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)


def set_parameters(params: Sequence[Tensor], arrays: Sequence[np.ndarray]) -> None:
    for p, a in zip(params, arrays):
        if p.shape != a.shape:
            raise DimensionError(f"cannot load {a.shape} into parameter {p.shape}")
        p.data[...] = a


def snapshot(params: Sequence[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


__all__ = [
    "Adam", "AdamState", "DimensionError", "GraphError", "NonFiniteError", "Tensor", "adam_step",
    "add", "as_tensor", "backward", "concat_channels", "conv2d", "deconv2d", "live_bytes", "matmul",
    "mse_loss", "mul", "no_grad", "peak_bytes", "relu", "reset_peak", "reshape", "set_parameters",
    "sine", "sine_activation", "snapshot", "sub", "sum",
]
