"""CTC loss in log space, a brute-force reference, and best-path decoding.

Class 0 is the blank; labels use 1..V.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, record, reshape

NEG_INF = -np.inf


class CTCInfeasibleError(ValueError):
    """The label needs more frames than the logits provide."""


def min_frames(label: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def _check_label(label, n_classes: int):
    for c in label:
        if not 1 <= c < n_classes:
            raise ValueError(f"label index {c} outside 1..{n_classes - 1}")


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def _lse(*xs):
    m = np.maximum.reduce(xs)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(under="ignore"):
        s = sum(np.exp(x - safe) for x in xs)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m), safe + np.log(s), NEG_INF)


def _extended(labels: list[Sequence[int]]):
    B = len(labels)
    S = 2 * max((len(l) for l in labels), default=0) + 1
    ext = np.zeros((B, S), dtype=np.int64)
    lengths = np.array([2 * len(l) + 1 for l in labels])
    skip = np.zeros((B, S), dtype=bool)
    for b, lab in enumerate(labels):
        ext[b, 1:2 * len(lab):2] = lab
        for k in range(1, len(lab)):
            if lab[k] != lab[k - 1]:
                skip[b, 2 * k + 1] = True
    valid = np.arange(S)[None, :] < lengths[:, None]
    return ext, lengths, skip, valid


def _shift(a, k):
    out = np.full_like(a, NEG_INF)
    if k < a.shape[1]:
        out[:, k:] = a[:, :-k]
    return out


def ctc_batch(logits: np.ndarray, labels: list[Sequence[int]], frames: Sequence[int] | None = None):
    """Per-sample negative log-likelihoods and d loss / d logits.

    logits: (B, T, C).  ``frames[b]`` is the number of leading frames that
    belong to sample b (default T); later frames get zero gradient.  Raises
    CTCInfeasibleError naming the first sample whose label cannot fit.
    """
    B, T, C = logits.shape
    frames = np.full(B, T) if frames is None else np.asarray(frames, dtype=np.int64)
    if frames.shape != (B,) or frames.min(initial=1) < 1 or frames.max(initial=0) > T:
        raise ValueError(f"frames must be {B} values in 1..{T}")
    for b, lab in enumerate(labels):
        _check_label(lab, C)
        if min_frames(lab) > frames[b]:
            raise CTCInfeasibleError(f"sample {b}: label of length {len(lab)} needs "
                                     f"{min_frames(lab)} frames, only {frames[b]} available")
    logp = _log_softmax(logits)
    ext, lengths, skip, valid = _extended(labels)
    S = ext.shape[1]
    emit = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)  # (B, T, S)
    emit = np.where(valid[:, None, :], emit, NEG_INF)

    live = np.arange(T)[None, :] < frames[:, None]                  # (B, T)
    alpha = np.full((B, T, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        two = np.where(skip, _shift(prev, 2), NEG_INF)
        step = _lse(prev, _shift(prev, 1), two) + emit[:, t]
        alpha[:, t] = np.where(live[:, t, None], step, prev)     # padding carries alpha through

    # beta excludes the emission at its own frame
    rows = np.arange(B)
    has_two = lengths > 1
    final = np.full((B, S), NEG_INF)
    final[rows, lengths - 1] = 0.0
    final[rows[has_two], lengths[has_two] - 2] = 0.0
    beta = np.full((B, T, S), NEG_INF)
    beta[:, T - 1] = final
    skip_next = np.zeros_like(skip)
    skip_next[:, :-2] = skip[:, 2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[:, t + 1] + emit[:, t + 1]
        up1 = np.full_like(nxt, NEG_INF)
        up1[:, :-1] = nxt[:, 1:]
        up2 = np.full_like(nxt, NEG_INF)
        up2[:, :-2] = nxt[:, 2:]
        up2 = np.where(skip_next, up2, NEG_INF)
        step = np.where(valid, _lse(nxt, up1, up2), NEG_INF)
        beta[:, t] = np.where(live[:, t + 1, None], step, final)

    last = alpha[rows, T - 1, lengths - 1]
    second = np.where(has_two, alpha[rows, T - 1, np.maximum(lengths - 2, 0)], NEG_INF)
    logz = _lse(last, second)
    loss = -logz

    with np.errstate(under="ignore"):
        occ = np.exp(alpha + beta - logz[:, None, None])            # (B, T, S)
    onehot = np.zeros((B, S, C))
    np.put_along_axis(onehot, ext[:, :, None], valid[:, :, None].astype(float), axis=2)
    grad = (np.exp(logp) - occ @ onehot) * live[:, :, None]
    return loss, grad


def ctc_loss_batch(logits, labels: list[Sequence[int]], reduction: str = "mean",
                   frames: Sequence[int] | None = None) -> Tensor:
    """Differentiable CTC over a (B, T, C) batch; ``reduction`` is mean or sum."""
    logits = as_tensor(logits)
    loss, grad = ctc_batch(logits.data, labels, frames)
    scale = 1.0 / len(labels) if reduction == "mean" else 1.0
    return record(np.array(loss.sum() * scale), (logits,), lambda g: (g * scale * grad,))


def ctc_loss(logits, label: Sequence[int]) -> Tensor:
    """Negative log-likelihood of one label under (T, C) logits."""
    logits = as_tensor(logits)
    return ctc_loss_batch(reshape(logits, (1,) + logits.shape), [list(label)], reduction="sum")


def collapse(path: Sequence[int]) -> list[int]:
    out, prev = [], None
    for c in path:
        if c != prev and c != 0:
            out.append(int(c))
        prev = c
    return out


def ctc_brute_force(logits, label: Sequence[int], limit: int = 10 ** 7) -> float:
    """Sum path probabilities by enumerating every length-T string."""
    x = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    T, C = x.shape
    if C ** T > limit:
        raise ValueError(f"search space {C}^{T} exceeds {limit}")
    _check_label(label, C)
    p = np.exp(_log_softmax(x))
    target = list(label)
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        if collapse(path) == target:
            total += float(np.prod(p[np.arange(T), path]))
    if total == 0.0:
        raise CTCInfeasibleError(f"no length-{T} path collapses to label {target}")
    return -float(np.log(total))


def greedy_decode(logits) -> list[int]:
    """Best path: argmax per frame, merge repeats, drop blanks."""
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return collapse(x.argmax(-1).tolist())
