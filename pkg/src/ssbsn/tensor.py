"""Dense tensors with a reverse-mode differentiation tape.

Arrays are numpy-backed and laid out (n, c, h, w).  Every operation that
touches a tensor with ``requires_grad`` records its parents and a closure that
maps the output gradient to parent gradients; :func:`backward` walks that
graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

COS_EPS = 1e-8
NORM_EPS = 1e-5

_state = {
    "dtype": np.dtype(np.float32),
    "grad_enabled": True,
    "counter": None,
}


def default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    _state["dtype"] = np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the tensor-wide floating point mode."""
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


class FlopCounter:
    """Accumulates operation counts per named scope during a forward pass."""

    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)
        self._scope: list[str] = []

    @contextlib.contextmanager
    def scope(self, name: str) -> Iterator[None]:
        self._scope.append(name)
        try:
            yield
        finally:
            self._scope.pop()

    def add(self, n: int, kind: str = "") -> None:
        key = "/".join(self._scope) or "root"
        if kind:
            key = f"{key}:{kind}"
        self.counts[key] += int(n)

    def total(self, kind: Optional[str] = None) -> int:
        if kind is None:
            return sum(self.counts.values())
        return sum(v for k, v in self.counts.items() if k.endswith(":" + kind))


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    prev = _state["counter"]
    counter = FlopCounter()
    _state["counter"] = counter
    try:
        yield counter
    finally:
        _state["counter"] = prev


def active_counter() -> Optional[FlopCounter]:
    return _state["counter"]


@contextlib.contextmanager
def flop_scope(name: str) -> Iterator[None]:
    counter = _state["counter"]
    if counter is None:
        yield
    else:
        with counter.scope(name):
            yield


def _record(n: int, kind: str) -> None:
    counter = _state["counter"]
    if counter is not None:
        counter.add(n, kind)


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Optional[Callable] = None, _op: str = ""):
        # op results keep their computed dtype; user-supplied data adopts the default
        if _op and isinstance(data, np.ndarray):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def abs(self):
        return tabs(self)

    def backward(self) -> "Tape":
        return backward(self)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable,
            op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents),
                      _backward=backward_fn, _op=op)
    return Tensor(data, _parents=(), _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# tape


@dataclass
class Tape:
    """Topologically ordered record of one backward sweep.

    ``nodes`` lists every differentiable tensor reachable from the loss, inputs
    before the operations that consume them.  ``grads`` maps ``id(node)`` to
    the gradient of the loss with respect to that node.
    """

    nodes: list = field(default_factory=list)
    grads: dict = field(default_factory=dict)

    def grad_of(self, t: Tensor) -> Optional[np.ndarray]:
        return self.grads.get(id(t))


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every differentiable ancestor of a scalar loss.

    Gradients from several consumers of one tensor are summed.  Each call
    assigns fresh gradients; nothing accumulates across calls.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads[id(node)]
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return Tape(nodes=order, grads=grads)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.maximum(a.data, 0), (a,), lambda g: (g * mask,), "relu")


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   bw, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes with numpy broadcasting."""
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _result(ad @ bd, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# convolutions


def _check_conv(x: Tensor, cin: int, k: int) -> None:
    if x.ndim != 4:
        raise ValueError(f"expected an (n, c, h, w) tensor, got shape {x.shape}")
    if x.shape[1] != cin:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {cin}")
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")


def _gather_taps(xc: np.ndarray, k: int, dilation: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """im2col on a (c, h, w, n) array: returns (c*k*k, ho*wo*n) tap columns.

    Taps falling outside the input read the implicit zero padding.
    """
    c, h, w, n = xc.shape
    span = dilation * (k - 1)
    # pad so every tap of every output position is in range, then view the taps
    bottom, right = max(0, ho + span - pad - h), max(0, wo + span - pad - w)
    xp = np.pad(xc, ((0, 0), (pad, bottom), (pad, right), (0, 0)))
    sc, sh, sw, sn = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (c, k, k, ho, wo, n), (sc, dilation * sh, dilation * sw, sh, sw, sn), writeable=False)
    return view.reshape(c * k * k, ho * wo * n)


# Convolutions compute in a (c, h, w, n) physical layout and hand back
# (n, c, h, w) views of it, so chained convolutions gather long contiguous runs.
_TO_CHWN = (1, 2, 3, 0)
_TO_NCHW = (3, 0, 1, 2)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, dilation: int = 1,
           padding: Optional[int] = None, mask: Optional[np.ndarray] = None) -> Tensor:
    """Stride-1 zero-padded 2-D convolution (cross-correlation).

    ``mask`` is a constant (k, k) array multiplied into the kernel on every
    call; masked taps are excluded from the FLOP count.
    """
    cout, cin, k, k2 = weight.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    _check_conv(x, cin, k)
    if dilation < 1:
        raise ValueError("dilation must be positive")
    span = dilation * (k - 1)
    if padding is None:
        padding = span // 2
    if not 0 <= padding <= span:
        raise ValueError(f"padding must lie in [0, {span}], got {padding}")
    n, _, h, w = x.shape
    ho, wo = h + 2 * padding - span, w + 2 * padding - span
    if ho <= 0 or wo <= 0:
        raise ValueError("input is smaller than the dilated kernel")

    wd = weight.data if mask is None else weight.data * mask
    wm = wd.reshape(cout, -1)
    cols = _gather_taps(x.data.transpose(_TO_CHWN), k, dilation, padding, ho, wo)
    out = wm @ cols
    if bias is not None:
        out += bias.data.reshape(cout, 1)
    out = out.reshape(cout, ho, wo, n).transpose(_TO_NCHW)
    taps = k * k if mask is None else int(np.count_nonzero(mask))
    _record(2 * n * ho * wo * cout * cin * taps, "conv")

    def bw(g):
        gc = g.transpose(_TO_CHWN)
        gw = (gc.reshape(cout, -1) @ cols.T).reshape(weight.shape)
        if mask is not None:
            gw = gw * mask
        # input gradient = correlation of g with the flipped, transposed kernel
        flipped = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
        gcols = _gather_taps(gc, k, dilation, span - padding, h, w)
        gx = (flipped @ gcols).reshape(cin, h, w, n).transpose(_TO_NCHW)
        gb = None if bias is None else g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "conv2d")


def conv1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-pixel channel mixing with a (c_out, c_in) matrix."""
    cout, cin = weight.shape
    _check_conv(x, cin, 1)
    n, _, h, w = x.shape
    xf = x.data.transpose(_TO_CHWN).reshape(cin, -1)
    out = weight.data @ xf
    if bias is not None:
        out += bias.data.reshape(cout, 1)
    _record(2 * n * h * w * cout * cin, "conv")
    wd = weight.data

    def bw(g):
        gf = g.transpose(_TO_CHWN).reshape(cout, -1)
        gx = (wd.T @ gf).reshape(cin, h, w, n).transpose(_TO_NCHW)
        gb = None if bias is None else gf.sum(axis=1)
        return gx, gf @ xf.T, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out.reshape(cout, h, w, n).transpose(_TO_NCHW), parents, bw, "conv1x1")


# ---------------------------------------------------------------------------
# grid decomposition


@dataclass
class GridView:
    """A (n, c, h, w) tensor regrouped onto a ``dhat``-spaced lattice.

    ``blocks`` has shape (n, dhat**2, h*w/dhat**2, c).  Group ``g`` has origin
    (row, col) = divmod(g, dhat) and holds pixels (row + i*dhat, col + j*dhat)
    in raster order of (i, j).
    """

    blocks: Tensor
    dhat: int
    height: int
    width: int

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [divmod(g, self.dhat) for g in range(self.dhat ** 2)]

    def pixel_of(self, group: int, index: int) -> tuple[int, int]:
        row0, col0 = divmod(group, self.dhat)
        i, j = divmod(index, self.width // self.dhat)
        return row0 + i * self.dhat, col0 + j * self.dhat


def locate_in_grid(row: int, col: int, dhat: int, width: int) -> tuple[int, int]:
    """(group, index) of pixel (row, col) under a ``dhat`` grid."""
    group = (row % dhat) * dhat + (col % dhat)
    return group, (row // dhat) * (width // dhat) + col // dhat


def grid_partition(x: Tensor, dhat: int) -> GridView:
    if dhat < 1:
        raise ValueError("grid size must be positive")
    n, c, h, w = x.shape
    if h % dhat or w % dhat:
        raise ValueError(f"grid {dhat} does not divide spatial size {h}x{w}; pad first")
    hb, wb = h // dhat, w // dhat
    fwd = (0, 3, 5, 2, 4, 1)  # (n, c, i, a, j, b) -> (n, a, b, i, j, c)
    inv = np.argsort(fwd)

    def bw(g):
        return (g.reshape(n, dhat, dhat, hb, wb, c).transpose(inv).reshape(n, c, h, w),)

    data = x.data.reshape(n, c, hb, dhat, wb, dhat).transpose(fwd)
    data = np.ascontiguousarray(data).reshape(n, dhat * dhat, hb * wb, c)
    return GridView(_result(data, (x,), bw, "grid_partition"), dhat, h, w)


def grid_merge(view: GridView) -> Tensor:
    blocks, dhat, h, w = view.blocks, view.dhat, view.height, view.width
    n, _, _, c = blocks.shape
    hb, wb = h // dhat, w // dhat
    fwd = (0, 5, 3, 1, 4, 2)  # (n, a, b, i, j, c) -> (n, c, i, a, j, b)
    inv = np.argsort(fwd)

    def bw(g):
        g6 = g.reshape(n, c, hb, dhat, wb, dhat).transpose(inv)
        return (np.ascontiguousarray(g6).reshape(blocks.shape),)

    data = blocks.data.reshape(n, dhat, dhat, hb, wb, c).transpose(fwd)
    return _result(np.ascontiguousarray(data).reshape(n, c, h, w), (blocks,), bw, "grid_merge")


# ---------------------------------------------------------------------------
# attention primitives


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, shifted by the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), bw, "softmax_rows")


def _unit_rows(x: np.ndarray):
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    live = norm > COS_EPS
    denom = np.where(live, norm, COS_EPS)
    return x / denom, denom, live


def _unit_rows_grad(g: np.ndarray, unit: np.ndarray, denom: np.ndarray, live: np.ndarray):
    radial = np.where(live, (g * unit).sum(axis=-1, keepdims=True), 0)
    return (g - unit * radial) / denom


def cosine_matrix(q: Tensor, k: Tensor) -> Tensor:
    """Pairwise cosine similarity between the rows of ``q`` and ``k``.

    Works on stacks of matrices (..., n, c).  Rows with norm below 1e-8 are
    divided by 1e-8 instead, which sends their similarities to ~0.
    """
    qu, qd, ql = _unit_rows(q.data)
    ku, kd, kl = _unit_rows(k.data)
    raw = qu @ np.swapaxes(ku, -1, -2)
    out = np.clip(raw, -1.0, 1.0)

    def bw(g):
        gq = g @ ku
        gk = np.swapaxes(g, -1, -2) @ qu
        return _unit_rows_grad(gq, qu, qd, ql), _unit_rows_grad(gk, ku, kd, kl)

    return _result(out, (q, k), bw, "cosine_matrix")


def layer_norm_channels(x: Tensor, weight: Tensor, shift: Tensor) -> Tensor:
    """Normalise each pixel's channel vector, then apply a per-channel affine map."""
    c = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = centered * inv_std
    wv = weight.data.reshape(1, c, 1, 1)
    out = xhat * wv + shift.data.reshape(1, c, 1, 1)

    def bw(g):
        gh = g * wv
        gx = inv_std * (gh - gh.mean(axis=1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _result(out, (x, weight, shift), bw, "layer_norm")
