"""Dense float64 tensors with a dynamic reverse-mode tape.

Operations record themselves on the active :class:`Tape` (see ``with Tape():``)
whenever at least one input requires a gradient.  Without an active tape
nothing is recorded, which is how inference and finite-difference probes run.

Broadcasting follows numpy; backward rules sum gradients back down to the
input's shape.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

EPS = 1e-8

_local = threading.local()


class Tape:
    """Ordered record of operations for one backward pass.

    Nodes are appended as operations execute, so list order is a topological
    order of the computation.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: "Tensor", parents: tuple["Tensor", ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as an op output and put it on the active tape.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(out, tuple(parents), backward)
        tape.nodes.append(out._node)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, tape: Tape | None = None, params: Sequence[Tensor] = ()) -> dict[int, np.ndarray]:
    """Run the reverse sweep from a scalar ``loss``.

    Leaf tensors that require grad receive ``.grad`` (overwritten, not
    accumulated across calls).  Every tensor in ``params`` ends with a grad,
    zero-filled when unreachable.  Returns the id -> gradient map for leaves.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise RuntimeError("no tape to differentiate through")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss._node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent._node is None:
                leaves[key] = parent
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = grads.get(key, np.zeros_like(leaf.data))
        result[key] = leaf.grad
    for p in params:
        if id(p) not in result:
            p.grad = np.zeros_like(p.data)
            result[id(p)] = p.grad
    return result


# -- arithmetic -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data * b.data, (a, b),
                  lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return record(out, (a, b),
                  lambda g: (unbroadcast(g / b.data, a.shape),
                             unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch semantics (leading dims broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ValueError("matmul needs at least 1-d operands")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if ka != kb:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape} ({ka} != {kb})")
    out = a.data @ b.data

    def bw(g):
        A, B, G = a.data, b.data, g
        if A.ndim == 1:
            A, G = A[None, :], G[..., None, :]
        if B.ndim == 1:
            B, G = B[:, None], G[..., None]
        ga = G @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ G
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., 0]
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return record(out, (a, b), bw)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# -- shape ------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return record(np.broadcast_to(a.data, shape).copy(), (a,),
                  lambda g: (unbroadcast(g, a.shape),))


def getitem(a, idx) -> Tensor:
    """Basic (slice/integer/ellipsis) indexing only."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return record(a.data[idx].copy(), (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of an empty list")
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.ndim != nd or any(p.shape[i] != parts[0].shape[i] for i in range(nd) if i != ax):
            raise ValueError(f"concat extent mismatch on non-concat axes: "
                             f"{[q.shape for q in parts]} along axis {axis}")
    if len(parts) == 1:
        return parts[0]
    sizes = [p.shape[ax] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return record(np.concatenate([p.data for p in parts], axis=ax), parts,
                  lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(parts)))

    return record(out, parts, bw)


# -- elementwise maps -------------------------------------------------------

def _sigmoid(x):
    # branch-free stable form
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _map_sigmoid(x):
    y = _sigmoid(x)
    return y, lambda g: g * y * (1.0 - y)


def _map_tanh(x):
    y = np.tanh(x)
    return y, lambda g: g * (1.0 - y * y)


def _map_softplus(x):
    return _softplus(x), lambda g: g * _sigmoid(x)


def _map_oneplus(x):
    return 1.0 + _softplus(x), lambda g: g * _sigmoid(x)


def _map_relu(x):
    mask = x > 0
    return np.where(mask, x, 0.0), lambda g: g * mask


def _map_exp(x):
    y = np.exp(x)
    return y, lambda g: g * y


def _map_log(x):
    if np.any(x <= 0):
        raise ValueError("log of non-positive value")
    return np.log(x), lambda g: g / x


def _map_sqrt(x):
    if np.any(x < 0):
        raise ValueError("sqrt of negative value")
    y = np.sqrt(x)
    return y, lambda g: g * 0.5 / y


UNARY = {
    "sigmoid": _map_sigmoid,
    "tanh": _map_tanh,
    "softplus": _map_softplus,
    "oneplus": _map_oneplus,
    "relu": _map_relu,
    "exp": _map_exp,
    "log": _map_log,
    "sqrt": _map_sqrt,
}


def map_unary(x, f: str) -> Tensor:
    x = as_tensor(x)
    try:
        rule = UNARY[f]
    except KeyError:
        raise ValueError(f"unknown unary map {f!r}; known: {sorted(UNARY)}") from None
    y, bw = rule(x.data)
    return record(y, (x,), lambda g: (bw(g),))


def sigmoid(x):
    return map_unary(x, "sigmoid")


def tanh(x):
    return map_unary(x, "tanh")


def softplus(x):
    return map_unary(x, "softplus")


def oneplus(x):
    return map_unary(x, "oneplus")


def relu(x):
    return map_unary(x, "relu")


def exp(x):
    return map_unary(x, "exp")


def log(x):
    return map_unary(x, "log")


# -- normalizers ------------------------------------------------------------

def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (x,), bw)


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return record(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def cosine_similarity(keys, mem, eps: float = EPS) -> Tensor:
    """Cosine score of each key against each memory row.

    keys: (..., H, D), mem: (..., N, D) -> (..., H, N).  The denominator is
    ``|k|·|m| + eps`` so zero rows (a fresh memory) score 0 with finite
    gradients.
    """
    keys, mem = as_tensor(keys), as_tensor(mem)
    if keys.shape[-1] != mem.shape[-1]:
        raise ValueError(f"key width {keys.shape[-1]} != slot width {mem.shape[-1]}")
    k, m = keys.data, mem.data
    dot = k @ np.swapaxes(m, -1, -2)
    nk = np.sqrt((k * k).sum(-1))
    nm = np.sqrt((m * m).sum(-1))
    den = nk[..., :, None] * nm[..., None, :] + eps
    out = dot / den

    def bw(g):
        gd = g / den                                  # d out / d dot
        gden = -(g * out / den)                       # d out / d den
        k_hat = np.divide(k, nk[..., None], out=np.zeros_like(k), where=nk[..., None] > 0)
        m_hat = np.divide(m, nm[..., None], out=np.zeros_like(m), where=nm[..., None] > 0)
        gnk = (gden * nm[..., None, :]).sum(-1)      # (..., H)
        gnm = (gden * nk[..., :, None]).sum(-2)      # (..., N)
        gk = gd @ m + gnk[..., None] * k_hat
        gm = np.swapaxes(gd, -1, -2) @ k + gnm[..., None] * m_hat
        return unbroadcast(gk, keys.shape), unbroadcast(gm, mem.shape)

    return record(out, (keys, mem), bw)


# -- gradient checking ------------------------------------------------------

def numeric_grad(f: Callable[[], Tensor], param: Tensor, index, step: float = 1e-5) -> float:
    old = param.data[index]
    param.data[index] = old + step
    fp = float(f().data)
    param.data[index] = old - step
    fm = float(f().data)
    param.data[index] = old
    return (fp - fm) / (2.0 * step)


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
              max_coords: int | None = None, seed: int = 0,
              report: dict | None = None) -> float:
    """Max relative error between tape and central-difference gradients.

    ``f`` rebuilds the scalar from ``params`` on every call.  With
    ``max_coords`` set, each parameter is probed at that many random
    coordinates instead of all of them.  ``report`` (optional) receives the
    per-parameter maxima keyed by parameter name or position.
    """
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    backward(loss, tape, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for pos, p in enumerate(params):
        analytic = p.grad.copy()
        n = p.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        pworst = 0.0
        for flat in coords:
            idx = np.unravel_index(flat, p.shape)
            num = numeric_grad(f, p, idx, step)
            a = analytic[idx]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            pworst = max(pworst, err)
        if report is not None:
            report[p.name or str(pos)] = pworst
        worst = max(worst, pworst)
    return worst
