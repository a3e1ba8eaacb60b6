"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a backward rule on the
output tensor; :func:`backward` walks that graph once in reverse topological
order. Broadcasting is limited to scalar-with-tensor and a trailing bias row
``(k,)`` against ``(..., k)``; anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...]) -> None:
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data.astype(DTYPE, copy=False)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis: int | None = None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> Tensor:
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_kind(op: str, a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar_b"
    if a.ndim == 0:
        return "scalar_a"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "row_b"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "row_a"
    raise ShapeError(op, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    return grad.reshape(-1, shape[0]).sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind("sub", a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind("div", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g / bd, ad.shape), _reduce_to(-g * ad / (bd * bd), bd.shape)

    return _make(ad / bd, (a, b), bw)


def sq_diff(a, b) -> Tensor:
    """Elementwise ``(a - b)**2``; shapes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sq_diff", a.shape, b.shape)
    d = a.data - b.data

    def bw(g):
        return 2.0 * g * d, -2.0 * g * d

    return _make(d * d, (a, b), bw)


# ---------------------------------------------------------------------------
# unary ops


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any input
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise ContractError("log: non-positive input")
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)
    return _make(r, (x,), lambda g: (g * 0.5 / r,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable ``log(softmax(x))`` over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % x.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _make(x.data.sum(axis=ax), (x,), bw)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    if n == 0:
        raise ContractError("mean of an empty tensor")
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _make(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("transpose", x.shape)
    return _make(x.data.T, (x,), lambda g: (g.T,))


def index(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(x.data[idx]), (x,), bw)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis; empty (width 0) operands are allowed."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat of no tensors")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError("concat", ts[0].shape, t.shape)
    widths = [t.shape[-1] for t in ts]
    splits = np.cumsum(widths)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=-1))

    return _make(np.concatenate([t.data for t in ts], axis=-1), tuple(ts), bw)


def repeat_steps(x: Tensor, steps: int) -> Tensor:
    """``(B, H) -> (B, steps, H)`` by repeating the row at every step."""
    if x.ndim != 2:
        raise ShapeError("repeat_steps", x.shape)
    out = np.repeat(x.data[:, None, :], steps, axis=1)
    return _make(out, (x,), lambda g: (g.sum(axis=1),))


def matmul(a, b) -> Tensor:
    """``a (..., n) @ b (n, m)`` or ``a (..., n) @ b (n,)``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim not in (1, 2) or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    n = ad.shape[-1]

    def bw(g):
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = ad.reshape(-1, n).T @ g.reshape(-1)
        else:
            ga = g @ bd.T
            gb = ad.reshape(-1, n).T @ g.reshape(-1, bd.shape[1])
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


# ---------------------------------------------------------------------------
# fused LSTM layer


def lstm(x: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> Tensor:
    """Run one LSTM layer over a batch of sequences from a zero initial state.

    ``x`` is ``(B, T, D)``; ``w_ih`` is ``(D, 4H)``, ``w_hh`` is ``(H, 4H)`` and
    ``bias`` is ``(4H,)`` with gate blocks ordered input, forget, cell, output.
    Returns the hidden state at every step, ``(B, T, H)``.
    """
    if x.ndim != 3:
        raise ShapeError("lstm", x.shape)
    bsz, steps, d_in = x.shape
    hid = w_hh.shape[0]
    if w_ih.shape != (d_in, 4 * hid):
        raise ShapeError("lstm(w_ih)", x.shape, w_ih.shape)
    if w_hh.shape != (hid, 4 * hid) or bias.shape != (4 * hid,):
        raise ShapeError("lstm(w_hh/bias)", w_hh.shape, bias.shape)

    xd, wi, wh, bd = x.data, w_ih.data, w_hh.data, bias.data
    xproj = xd @ wi + bd
    hs = np.empty((bsz, steps, hid), dtype=DTYPE)
    cs = np.empty((bsz, steps, hid), dtype=DTYPE)
    acts = np.empty((bsz, steps, 4 * hid), dtype=DTYPE)
    h = np.zeros((bsz, hid), dtype=DTYPE)
    c = np.zeros((bsz, hid), dtype=DTYPE)
    for t in range(steps):
        z = xproj[:, t] + h @ wh
        a = _sigmoid(z)
        a[:, 2 * hid : 3 * hid] = np.tanh(z[:, 2 * hid : 3 * hid])
        i, f, gg, o = a[:, :hid], a[:, hid : 2 * hid], a[:, 2 * hid : 3 * hid], a[:, 3 * hid :]
        c = f * c + i * gg
        h = o * np.tanh(c)
        acts[:, t] = a
        cs[:, t] = c
        hs[:, t] = h
    tanh_cs = np.tanh(cs)
    # derivative of each gate's activation w.r.t. its pre-activation
    dacts = acts * (1.0 - acts)
    dacts[:, :, 2 * hid : 3 * hid] = 1.0 - acts[:, :, 2 * hid : 3 * hid] ** 2

    def bw(g_hs):
        dz_all = np.empty_like(acts)
        dh_next = np.zeros((bsz, hid), dtype=DTYPE)
        dc_next = np.zeros((bsz, hid), dtype=DTYPE)
        zeros = np.zeros((bsz, hid), dtype=DTYPE)
        whT = wh.T
        for t in range(steps - 1, -1, -1):
            a = acts[:, t]
            i, f, gg, o = a[:, :hid], a[:, hid : 2 * hid], a[:, 2 * hid : 3 * hid], a[:, 3 * hid :]
            tc = tanh_cs[:, t]
            c_prev = cs[:, t - 1] if t > 0 else zeros
            dh = g_hs[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dz_all[:, t]
            dz[:, :hid] = dc * gg
            dz[:, hid : 2 * hid] = dc * c_prev
            dz[:, 2 * hid : 3 * hid] = dc * i
            dz[:, 3 * hid :] = dh * tc
            dz *= dacts[:, t]
            dc_next = dc * f
            dh_next = dz @ whT
        dx = dz_all @ wi.T
        dwi = xd.reshape(-1, d_in).T @ dz_all.reshape(-1, 4 * hid)
        h_prev = np.concatenate([np.zeros((bsz, 1, hid)), hs[:, :-1]], axis=1)
        dwh = h_prev.reshape(-1, hid).T @ dz_all.reshape(-1, 4 * hid)
        db = dz_all.sum(axis=(0, 1))
        return dx, dwi, dwh, db

    return _make(hs, (x, w_ih, w_hh, bias), bw)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Backpropagate a scalar loss.

    Gradients accumulate into ``.grad`` of every ``requires_grad`` leaf. The
    returned map covers ``params`` (zeros for leaves the loss does not touch),
    or every reached leaf when ``params`` is omitted.
    """
    if loss.data.shape != () and loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                leaves[id(node)] = node
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    if params is None:
        return {leaf: leaf.grad for leaf in leaves.values()}
    out = {}
    for p in params:
        out[p] = p.grad if id(p) in leaves else np.zeros_like(p.data)
    return out


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    With ``coords`` only that many randomly chosen entries per parameter are
    perturbed, which keeps checks on LSTM-sized models cheap.
    """
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
    analytic = backward(loss_fn(), params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            ana = analytic[p].reshape(-1)
            picks = range(flat.size)
            if coords is not None and coords < flat.size:
                picks = rng.choice(flat.size, size=coords, replace=False)
            for j in picks:
                orig = flat[j]
                flat[j] = orig + epsilon
                up = loss_fn().item()
                flat[j] = orig - epsilon
                down = loss_fn().item()
                flat[j] = orig
                num = (up - down) / (2.0 * epsilon)
                denom = max(abs(ana[j]), abs(num), 1e-8)
                worst = max(worst, abs(ana[j] - num) / denom)
    for p in params:
        p.grad = None
    return worst
