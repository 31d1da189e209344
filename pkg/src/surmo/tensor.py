"""Dense tensors with reverse-mode differentiation, plus Adam.

The graph is built eagerly: every op returns a new :class:`Tensor` holding
its parents and a closure mapping the output gradient to parent gradients.
Images use HWC layout with an implicit batch of one.

Values are float32 by default. Gradient checks run the same graph in
float64 (see :func:`precision` and :func:`gradcheck`).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

_default_dtype = np.float32


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors and parameters."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


def default_dtype():
    return _default_dtype


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, name=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=_default_dtype), requires_grad=True, name=name)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_default_dtype))


def make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result; ``backward(g)`` returns one gradient per parent."""
    if not any(_needs_grad(p) for p in parents):
        return Tensor(data)
    return Tensor(data, _parents=tuple(parents), _backward=backward)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return make(a.data * b.data, (a, b),
                lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return make(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    k = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make(x.data * k, (x,), lambda g: (g * k,))


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = np.logaddexp(0.0, d).astype(x.dtype)
    sig = (0.5 * (1.0 + np.tanh(0.5 * d))).astype(x.dtype)
    return make(out, (x,), lambda g: (g * sig,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clamp; gradient passes on the closed interval [lo, hi]."""
    inside = (x.data >= lo) & (x.data <= hi)
    return make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """x / sqrt(|x|^2 + eps) along ``axis``."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    y = x.data / n

    def back(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return make(y, (x,), back)


# ---------------------------------------------------------------- structure

def reshape(x: Tensor, shape) -> Tensor:
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def index(x: Tensor, idx) -> Tensor:
    def back(g):
        out = np.zeros_like(x.data)
        if _fancy(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return make(x.data[idx], (x,), back)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            s != t for i, (s, t) in enumerate(zip(x.shape, xs[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return make(np.concatenate([x.data for x in xs], axis=ax), xs,
                lambda g: tuple(np.split(g, sizes, axis=ax)))


def gather_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """x[rows] for a 1-D integer index array (rows may repeat)."""
    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, rows, g)
        return (out,)

    return make(x.data[rows], (x,), back)


def scatter_rows(x: Tensor, rows: np.ndarray, n: int) -> Tensor:
    """Place row ``i`` of x at ``rows[i]`` of an (n, ...) zero array; rows unique."""
    out = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    out[rows] = x.data
    return make(out, (x,), lambda g: (g[rows],))


def sum_all(x: Tensor) -> Tensor:
    return make(x.data.sum(keepdims=False), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return make(x.data.mean(), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


# ---------------------------------------------------------------- layers

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b for x of shape (..., in) and w of shape (in, out)."""
    if x.shape[-1] != w.shape[0] or (b is not None and b.shape != (w.shape[1],)):
        raise ShapeError(
            f"dense: input {x.shape}, weight {w.shape}, bias {None if b is None else b.shape}"
        )
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    x2 = x.data.reshape(-1, w.shape[0])

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, back)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int | None = None) -> Tensor:
    """2-D cross-correlation, HWC input, weight (k, k, C_in, C_out).

    ``pad`` defaults to k // 2 (zero padding, "same" for stride 1).
    """
    k = w.shape[0]
    if w.ndim != 4 or w.shape[1] != k or x.ndim != 3 or x.shape[2] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape}, weight {w.shape}")
    if b is not None and b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: bias {b.shape} for weight {w.shape}")
    p = k // 2 if pad is None else pad
    s = stride
    H, W, C = x.shape
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0))) if p else x.data
    Hp, Wp = xp.shape[:2]
    Ho, Wo = (Hp - k) // s + 1, (Wp - k) // s + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {xp.shape}")
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::s, ::s]  # (Ho, Wo, C, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(Ho * Wo, k * k * C)
    wm = w.data.reshape(k * k * C, -1)
    out = cols @ wm
    if b is not None:
        out += b.data
    out = out.reshape(Ho, Wo, -1)

    def back(g):
        g2 = g.reshape(Ho * Wo, -1)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ wm.T).reshape(Ho, Wo, k, k, C)
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                gxp[di:di + s * Ho:s, dj:dj + s * Wo:s] += gcols[:, :, di, dj]
        gx = gxp[p:p + H, p:p + W] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, back)


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation matrix with half-pixel centers and edge clamping."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(int)
    frac = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x: Tensor, factor: int = 2) -> Tensor:
    """Bilinear upsampling of an HWC image by an integer factor."""
    H, W, C = x.shape
    ry = sp.csr_matrix(resize_matrix(H, H * factor, np.float64))
    rx = sp.csr_matrix(resize_matrix(W, W * factor, np.float64))
    ryt, rxt = ry.T.tocsr(), rx.T.tocsr()

    def apply(my, mx, a, h_out, w_out):
        # rows first, then columns; a is (h_in, w_in, C)
        t = (my @ a.reshape(a.shape[0], -1)).reshape(h_out, a.shape[1], C)
        t = (mx @ t.transpose(1, 0, 2).reshape(a.shape[1], -1)).reshape(w_out, h_out, C)
        return np.ascontiguousarray(t.transpose(1, 0, 2)).astype(a.dtype, copy=False)

    out = apply(ry, rx, x.data, H * factor, W * factor)

    def back(g):
        return (apply(ryt, rxt, g, H, W),)

    return make(out, (x,), back)


# ---------------------------------------------------------------- losses

def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    _same_shape("mse", pred, target)
    d = pred.data - target.data
    n = d.size
    return make(np.mean(d * d), (pred, target), lambda g: (2.0 * g * d / n, -2.0 * g * d / n))


def l1(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    _same_shape("l1", pred, target)
    d = pred.data - target.data
    n = d.size
    sgn = np.sign(d)
    return make(np.mean(np.abs(d)), (pred, target), lambda g: (g * sgn / n, -g * sgn / n))


def masked_mse(pred: Tensor, target, mask: np.ndarray) -> Tensor:
    """Mean squared error over the texels where ``mask`` (H, W) is true."""
    target = as_tensor(target)
    _same_shape("masked_mse", pred, target)
    if mask.shape != pred.shape[:2]:
        raise ShapeError(f"masked_mse: mask {mask.shape} for maps {pred.shape}")
    m = mask[..., None].astype(pred.dtype)
    n = max(int(mask.sum()) * pred.shape[2], 1)
    d = (pred.data - target.data) * m
    return make(np.sum(d * d) / n, (pred, target), lambda g: (2.0 * g * d / n, -2.0 * g * d / n))


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("adam_step: state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ShapeError(f"adam_step: state {m.shape} vs parameter {p.shape}")
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)


# ---------------------------------------------------------------- checking

def numerical_grad(f: Callable[[], float], arr: np.ndarray, eps: float, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = {}
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out


def relative_error(a, n, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradcheck(fn: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-3,
              max_entries: int | None = None, rng: np.random.Generator | None = None,
              floor: float = 1e-8) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` rebuilds the graph from ``leaves`` and returns a scalar tensor; run
    it under float64 leaves for a meaningful comparison. With ``max_entries``
    only that many randomly chosen entries per leaf are checked.
    """
    for leaf in leaves:
        leaf.grad = None
        leaf.requires_grad = True
    fn().backward()
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        n = leaf.data.size
        if max_entries is not None and n > max_entries:
            idx = rng.choice(n, size=max_entries, replace=False)
        else:
            idx = range(n)
        num = numerical_grad(lambda: float(fn().data), leaf.data, eps, idx)
        a = np.array([analytic.reshape(-1)[i] for i in num])
        worst = max(worst, relative_error(a, np.array(list(num.values())), floor))
    return worst
