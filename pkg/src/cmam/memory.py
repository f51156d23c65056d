"""External associative memory: addressing, gated three-way writing, reading.

All functions accept arbitrary leading batch dimensions.  Shapes below use
``...`` for them; N slots of width D, R read heads.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np

from .tensor import (Tensor, as_tensor, cosine_similarity, getitem, matmul, mean, mul, oneplus, record, reshape,
                     sigmoid, softmax_rows)


class InterfaceError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryConfig:
    slots: int = 16     # N
    width: int = 16     # D
    read_heads: int = 4  # R

    @property
    def interface_width(self) -> int:
        return interface_width(self.read_heads, self.width)


def interface_width(R: int, D: int) -> int:
    return R * (D + 2) + 3 * D + 5


@dataclass
class InterfaceVector:
    read_keys: Tensor        # (..., R, D)
    read_strengths: Tensor   # (..., R), >= 1
    free_gates: Tensor       # (..., R), in [0, 1]
    write_key: Tensor        # (..., D)
    write_strength: Tensor   # (..., 1), >= 1
    write_value: Tensor      # (..., D)
    erase: Tensor            # (..., D), in [0, 1]
    mode: Tensor             # (..., 3) simplex: allocation, last-read, content
    write_gate: Tensor       # (..., 1), in [0, 1]


def _layout(R: int, D: int):
    sizes = [("read_keys", R * D), ("read_strengths", R), ("free_gates", R), ("write_key", D),
             ("write_strength", 1), ("write_value", D), ("erase", D), ("mode", 3), ("write_gate", 1)]
    out, start = {}, 0
    for name, n in sizes:
        out[name] = slice(start, start + n)
        start += n
    return out


def parse_interface(raw, R: int, D: int) -> InterfaceVector:
    """Split and squash a raw interface emission.

    Field order is frozen (checkpoints depend on it):
    read keys | read strengths | free gates | write key | write strength |
    write value | erase | mode gate | write gate.
    """
    raw = as_tensor(raw)
    expected = interface_width(R, D)
    if raw.shape[-1] != expected:
        raise InterfaceError(f"interface width mismatch: expected {expected} for R={R}, D={D}, "
                             f"got {raw.shape[-1]}")
    lay = _layout(R, D)

    def field_(name):
        return getitem(raw, (Ellipsis, lay[name]))

    return InterfaceVector(
        read_keys=reshape(field_("read_keys"), raw.shape[:-1] + (R, D)),
        read_strengths=oneplus(field_("read_strengths")),
        free_gates=sigmoid(field_("free_gates")),
        write_key=field_("write_key"),
        write_strength=oneplus(field_("write_strength")),
        write_value=field_("write_value"),
        erase=sigmoid(field_("erase")),
        mode=softmax_rows(field_("mode")),
        write_gate=sigmoid(field_("write_gate")),
    )


def serialize_interface(iv: InterfaceVector) -> np.ndarray:
    """Raw pre-activations that parse back to ``iv`` (mode up to a shift)."""
    def logit(p):
        return np.log(p) - np.log1p(-p)

    def inv_oneplus(b):
        x = b - 1.0
        return x + np.log(-np.expm1(-x))

    keys = iv.read_keys.data
    parts = [
        keys.reshape(keys.shape[:-2] + (-1,)),
        inv_oneplus(iv.read_strengths.data),
        logit(iv.free_gates.data),
        iv.write_key.data,
        inv_oneplus(iv.write_strength.data),
        iv.write_value.data,
        logit(iv.erase.data),
        np.log(iv.mode.data),
        logit(iv.write_gate.data),
    ]
    return np.concatenate(parts, axis=-1)


# -- addressing ----------------------------------------------------------------

def content_weights(M, k, beta) -> Tensor:
    """softmax over slots of cosine(M(i), k) * beta.

    Accepts one key (k: (..., D), beta: scalar or (...)) or a head stack
    (k: (..., H, D), beta: (..., H)).
    """
    M, k, beta = as_tensor(M), as_tensor(k), as_tensor(beta)
    single = k.ndim == M.ndim - 1
    if single:
        k = reshape(k, k.shape[:-1] + (1, k.shape[-1]))
        beta = reshape(beta, beta.shape + (1,)) if beta.ndim else beta
    scores = cosine_similarity(k, M)                        # (..., H, N)
    if beta.ndim:
        beta = reshape(beta, beta.shape + (1,))
    w = softmax_rows(scores * beta)
    return reshape(w, w.shape[:-2] + (w.shape[-1],)) if single else w


def read_vectors(M, weights) -> Tensor:
    """r^j = sum_i w^j(i) M(i); weights (..., R, N) -> (..., R, D)."""
    return matmul(weights, M)


def memory_read(M, iv: InterfaceVector) -> tuple[Tensor, Tensor]:
    """Content-based read with every head; returns (read values, read weights)."""
    w = content_weights(M, iv.read_keys, iv.read_strengths)
    return read_vectors(M, w), w


def retention_and_usage(free_gates, prev_read_weights, prev_usage, prev_write_weight):
    """Retention psi = prod_j (1 - f^j w^{rj}_{t-1}) and the updated usage."""
    f, wr = as_tensor(free_gates), as_tensor(prev_read_weights)
    R = wr.shape[-2]
    keep = 1.0 - reshape(f, f.shape + (1,)) * wr              # (..., R, N)
    psi = reduce(mul, [getitem(keep, (Ellipsis, j, slice(None))) for j in range(R)])
    u, ww = as_tensor(prev_usage), as_tensor(prev_write_weight)
    usage = (u + ww - u * ww) * psi
    return psi, usage


def allocation_order(u: np.ndarray) -> np.ndarray:
    """Slot indices by ascending usage, ties by lower index."""
    return np.argsort(u, axis=-1, kind="stable")


def allocation(u) -> Tensor:
    """a[phi_k] = (1 - u[phi_k]) * prod_{i<k} u[phi_i] with phi = ascending sort.

    The sort permutation is treated as constant for differentiation.
    """
    u = as_tensor(u)
    phi = allocation_order(u.data)
    su = np.take_along_axis(u.data, phi, -1)
    N = su.shape[-1]
    cp = np.cumprod(np.concatenate([np.ones(su.shape[:-1] + (1,)), su[..., :-1]], -1), -1)
    a_sorted = (1.0 - su) * cp
    out = np.empty_like(a_sorted)
    np.put_along_axis(out, phi, a_sorted, -1)

    def bw(g):
        gs = np.take_along_axis(g, phi, -1)
        # d a_k / d su_j for j < k is (1 - su_k) * prod_{i<k, i != j} su_i
        idx = np.arange(N)
        rep = np.broadcast_to(su[..., None, :], su.shape[:-1] + (N, N)).copy()  # row j: su with j -> 1
        rep[..., idx, idx] = 1.0
        ex = np.cumprod(np.concatenate([np.ones(rep.shape[:-1] + (1,)), rep[..., :-1]], -1), -1)
        strict_upper = idx[None, :] > idx[:, None]               # [j, k]: k > j
        coeff = np.where(strict_upper, (1.0 - su)[..., None, :] * ex, 0.0)
        gsu = -gs * cp + (coeff * gs[..., None, :]).sum(-1)
        gu = np.empty_like(gsu)
        np.put_along_axis(gu, phi, gsu, -1)
        return (gu,)

    return record(out, (u,), bw)


def write_weight(alloc, prev_read_weights, content_w, mode, gate) -> Tensor:
    """w^w = g^w [g(0) a + g(1) mean_j w^{rj}_{t-1} + g(2) c^w]."""
    mode = as_tensor(mode)
    last_read = mean(as_tensor(prev_read_weights), axis=-2)

    def g(i):
        return getitem(mode, (Ellipsis, slice(i, i + 1)))

    mix = g(0) * alloc + g(1) * last_read + g(2) * content_w
    return gate * mix


def outer(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return reshape(a, a.shape + (1,)) * reshape(b, b.shape[:-1] + (1, b.shape[-1]))


def memory_write(M, w_w, erase, value) -> Tensor:
    """M' = M o (E - w e^T) + w v^T."""
    return M * (1.0 - outer(w_w, erase)) + outer(w_w, value)


# -- state and step ------------------------------------------------------------------

@dataclass
class MemoryState:
    memory: Tensor          # (..., N, D)
    usage: Tensor           # (..., N)
    read_weights: Tensor    # (..., R, N)
    write_weight: Tensor    # (..., N)
    read_values: Tensor     # (..., R, D)

    @classmethod
    def initial(cls, cfg: MemoryConfig, batch_shape: tuple[int, ...] = ()) -> "MemoryState":
        N, D, R = cfg.slots, cfg.width, cfg.read_heads
        return cls(Tensor(np.zeros(batch_shape + (N, D))), Tensor(np.zeros(batch_shape + (N,))),
                   Tensor(np.zeros(batch_shape + (R, N))), Tensor(np.zeros(batch_shape + (N,))),
                   Tensor(np.zeros(batch_shape + (R, D))))


def mam_step(state: MemoryState, raw, cfg: MemoryConfig, trace: dict | None = None):
    """One memory transaction: write first, then read the updated memory.

    Returns ``(new_state, read_out)`` with read_out (..., R * D).  ``trace``,
    when given, receives the intermediate tensors by name.
    """
    R, D = cfg.read_heads, cfg.width
    iv = parse_interface(raw, R, D)
    psi, usage = retention_and_usage(iv.free_gates, state.read_weights, state.usage, state.write_weight)
    alloc = allocation(usage)
    cw = content_weights(state.memory, iv.write_key, reshape(iv.write_strength, iv.write_strength.shape[:-1]))
    ww = write_weight(alloc, state.read_weights, cw, iv.mode, iv.write_gate)
    M = memory_write(state.memory, ww, iv.erase, iv.write_value)
    r, wr = memory_read(M, iv)
    if trace is not None:
        trace.update(interface=iv, retention=psi, usage=usage, allocation=alloc,
                     content_write=cw, write_weight=ww, read_weights=wr, memory=M)
    new = MemoryState(M, usage, wr, ww, r)
    return new, reshape(r, r.shape[:-2] + (R * D,))


def readout(state: MemoryState) -> Tensor:
    r = state.read_values
    return reshape(r, r.shape[:-2] + (r.shape[-2] * r.shape[-1],))


__all__ = [
    "InterfaceError", "MemoryConfig", "InterfaceVector", "MemoryState", "interface_width",
    "parse_interface", "serialize_interface", "content_weights", "read_vectors", "memory_read",
    "retention_and_usage", "allocation", "allocation_order", "write_weight", "memory_write",
    "mam_step", "readout", "outer",
]
