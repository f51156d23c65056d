"""Finite-difference checks of every differentiable building block.

``run_suite("tiny")`` is what ``cmam gradcheck --profile tiny`` executes.
Each check returns the max relative error against its tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .config import PROFILES
from .ctc import ctc_loss, ctc_loss_batch
from .layers import ConvStack, LstmParams, cnn_encode, conv2d, default_layers, linear, lstm_step, maxpool2d
from .memory import MemoryConfig, MemoryState, allocation, mam_step
from .model import CmamParams, CrnnParams, Model, backward_sweep, forward_sweep, output_project
from .tensor import Tensor, gradcheck

ELEMENTWISE_TOL = 1e-6
LAYER_TOL = 1e-5
COMPOSITE_TOL = 1e-4
# Whole-network losses are O(10); at h = 1e-5 their summation roundoff (~1e-10)
# swamps coordinates whose true gradient is ~1e-8.  Smooth parameters (the
# recurrent head) are probed with a larger step.  Parameters behind relu /
# max-pool keep the small one so a probe does not cross a kink.
COMPOSITE_STEP = 1e-4
KINKED_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<28} max rel err {self.error:.2e}  (tol {self.tol:.0e})"


def _leaf(rng, shape, name, lo=None, hi=None):
    data = rng.uniform(lo, hi, size=shape) if lo is not None else rng.normal(size=shape)
    return Tensor(data, requires_grad=True, name=name)


def _weighted(rng, out: Tensor) -> Callable[[Tensor], Tensor]:
    # |w| >= 0.5 keeps finite-difference roundoff small relative to every coordinate
    w = Tensor(rng.choice([-1.0, 1.0], size=out.shape) * rng.uniform(0.5, 1.5, size=out.shape))
    return lambda y: tn.tsum(y * w)


def _probe(rng, build: Callable[[], Tensor], params, max_coords=None, step=1e-5) -> float:
    """gradcheck of sum(w * build()) with fixed random weights w."""
    weigh = _weighted(rng, build())
    return gradcheck(lambda: weigh(build()), params, step=step, max_coords=max_coords)


def _split_check(loss: Callable[[], Tensor], model: Model, max_coords: int) -> float:
    """Max error over CNN parameters (small step) and head parameters (large step)."""
    cnn = model.cnn.tensors()
    head = [t for t in model.parameters() if all(t is not c for c in cnn)]
    return max(gradcheck(loss, cnn, step=KINKED_STEP, max_coords=max_coords),
               gradcheck(loss, head, step=COMPOSITE_STEP, max_coords=max_coords))


def _random_state(rng, cfg: MemoryConfig, batch=()):
    N, D, R = cfg.slots, cfg.width, cfg.read_heads
    return MemoryState(
        Tensor(rng.normal(size=batch + (N, D)), requires_grad=True, name="M"),
        Tensor(rng.uniform(0.05, 0.95, size=batch + (N,)), requires_grad=True, name="u"),
        Tensor(rng.dirichlet(np.ones(N), size=batch + (R,)), requires_grad=True, name="w_r"),
        Tensor(0.8 * rng.dirichlet(np.ones(N), size=batch or None), requires_grad=True, name="w_w"),
        Tensor(rng.normal(size=batch + (R, D))),
    )


def elementwise_checks(rng) -> list[CheckResult]:
    out = []
    n = 20  # random evaluation points per op
    domains = {"log": (0.2, 3.0), "relu": None, "exp": (-2.0, 2.0)}
    for f in tn.UNARY:
        if f == "sqrt":
            lo, hi = 0.2, 3.0
        else:
            lo, hi = domains.get(f) or (-3.0, 3.0)
        x = _leaf(rng, (n,), "x", lo, hi)
        if f == "relu":
            x.data = np.sign(rng.normal(size=n)) * rng.uniform(0.1, 2.0, size=n)
        out.append(CheckResult(f"map_unary[{f}]", _probe(rng, lambda: tn.map_unary(x, f), [x]), ELEMENTWISE_TOL))
    a, b = _leaf(rng, (3, 4), "a"), _leaf(rng, (4, 2), "b")
    out.append(CheckResult("matmul 3x4 @ 4x2", _probe(rng, lambda: a @ b, [a, b]), ELEMENTWISE_TOL))
    p, q = _leaf(rng, (2, 3, 4), "p"), _leaf(rng, (4,), "q", 0.5, 2.0)
    out.append(CheckResult("add/sub/mul/div broadcast",
                           _probe(rng, lambda: (p + q) * p - p / q, [p, q]), ELEMENTWISE_TOL))
    s = _leaf(rng, (4, 6), "s")
    out.append(CheckResult("softmax_rows", _probe(rng, lambda: tn.softmax_rows(s), [s]), ELEMENTWISE_TOL))
    out.append(CheckResult("log_softmax_rows", _probe(rng, lambda: tn.log_softmax_rows(s), [s]), ELEMENTWISE_TOL))
    c1, c2 = _leaf(rng, (2, 3), "c1"), _leaf(rng, (2, 2), "c2")
    out.append(CheckResult("concat", _probe(rng, lambda: tn.concat([c1, c2], axis=1), [c1, c2]), ELEMENTWISE_TOL))
    out.append(CheckResult("stack/getitem/reshape",
                           _probe(rng, lambda: tn.reshape(tn.stack([c1[:, 1:], c2], 0), (8,)), [c1, c2]),
                           ELEMENTWISE_TOL))
    k, m = _leaf(rng, (3, 5), "k"), _leaf(rng, (4, 5), "m")
    out.append(CheckResult("cosine_similarity", _probe(rng, lambda: tn.cosine_similarity(k, m), [k, m]),
                           ELEMENTWISE_TOL))
    u = _leaf(rng, (6,), "u", 0.05, 0.95)
    out.append(CheckResult("allocation", _probe(rng, lambda: allocation(u), [u]), ELEMENTWISE_TOL))
    w, bb, x = _leaf(rng, (5, 3), "w"), _leaf(rng, (3,), "b"), _leaf(rng, (2, 5), "x")
    out.append(CheckResult("linear", _probe(rng, lambda: linear(w, bb, x), [w, bb, x]), ELEMENTWISE_TOL))
    return out


def layer_checks(rng, profile: dict) -> list[CheckResult]:
    out = []
    lp = LstmParams.init(4, 5, rng, "lstm")
    lp.b.data = rng.normal(size=lp.b.shape) * 0.5
    lp.h0.data = rng.normal(size=5) * 0.5
    lp.c0.data = rng.normal(size=5) * 0.5
    xs = [_leaf(rng, (4,), f"x{t}") for t in range(3)]

    def unrolled():
        h, c = lp.h0, lp.c0
        outs = []
        for x in xs:
            h, c, o = lstm_step(lp, x, h, c)
            outs.append(o)
        return tn.concat(outs + [c], axis=0)

    out.append(CheckResult("lstm 3-step unrolled", _probe(rng, unrolled, lp.tensors() + xs), LAYER_TOL))
    img = _leaf(rng, (1, 1, 5, 5), "img")
    kern, kb = _leaf(rng, (2, 1, 3, 3), "kern"), _leaf(rng, (2,), "kb")
    out.append(CheckResult("conv2d 1x5x5", _probe(rng, lambda: conv2d(img, kern, kb, padding=1), [img, kern, kb]),
                           LAYER_TOL))
    pool_in = Tensor(rng.permutation(48).reshape(1, 3, 4, 4) * 0.1 + rng.uniform(0, 0.01, (1, 3, 4, 4)),
                     requires_grad=True, name="pool_in")
    out.append(CheckResult("maxpool2d 2x2", _probe(rng, lambda: maxpool2d(pool_in, (2, 2)), [pool_in]),
                           ELEMENTWISE_TOL))
    stack = ConvStack.init(rng, default_layers(profile["cnn_channels"]), feature_width=profile["feature_width"])
    for t in stack.tensors():
        if t.name.endswith(".b"):
            t.data = rng.normal(size=t.shape) * 0.1
    image = Tensor(rng.uniform(size=(32, 16)))
    out.append(CheckResult("cnn_encode 32x16", _probe(rng, lambda: cnn_encode(stack, image), stack.tensors(),
                                                      max_coords=8, step=KINKED_STEP), COMPOSITE_TOL))
    return out


def memory_checks(rng, mem: MemoryConfig) -> list[CheckResult]:
    state = _random_state(rng, mem)
    raw = _leaf(rng, (mem.interface_width,), "xi")

    def step():
        new, r = mam_step(state, raw, mem)
        return tn.concat([r, tn.reshape(new.memory, (-1,)), new.usage, new.write_weight], axis=0)

    leaves = [raw, state.memory, state.usage, state.read_weights, state.write_weight]
    return [CheckResult("mam_step", _probe(rng, step, leaves, max_coords=40, step=COMPOSITE_STEP), COMPOSITE_TOL)]


def _tiny_head(rng, mem: MemoryConfig, width: int, hidden: int, vocab: int, L: int) -> CmamParams:
    head = CmamParams.init(rng, mem, width, hidden, vocab, L)
    for lp in (head.lstm_f, head.lstm_b):
        lp.h0.data = rng.normal(size=lp.h0.shape) * 0.3
        lp.c0.data = rng.normal(size=lp.c0.shape) * 0.3
    head.b_out.data = rng.normal(size=head.b_out.shape) * 0.3
    return head


def model_checks(rng, profile: dict, T: int = 3) -> list[CheckResult]:
    out = []
    mem = MemoryConfig(profile["mem_slots"], profile["mem_width"], profile["read_heads"])
    F, H, V = profile["feature_width"], profile["hidden"], 4
    head = _tiny_head(rng, mem, F, H, V, 1)
    ys = [_leaf(rng, (F,), f"y{t}") for t in range(T)]
    cap = 12

    out.append(CheckResult(f"backward_sweep T={T}",
                           _probe(rng, lambda: tn.concat(backward_sweep(head, ys), 0), head.lstm_b.tensors() + ys,
                                  max_coords=cap), LAYER_TOL))
    ob = [_leaf(rng, (H,), f"ob{t}") for t in range(T)]

    def fsweep():
        _, xi, yss, reads, st = forward_sweep(head, ys, ob, MemoryState.initial(mem))
        return tn.concat(yss + reads + [tn.reshape(st.memory, (-1,))], 0)

    fparams = head.lstm_f.tensors() + [head.w_xi, head.w_s, head.r0] + ys + ob
    out.append(CheckResult(f"forward_sweep T={T}",
                           _probe(rng, fsweep, fparams, max_coords=cap, step=COMPOSITE_STEP), COMPOSITE_TOL))
    reads = [_leaf(rng, (mem.read_heads * mem.width,), f"r{t}") for t in range(T)]
    out.append(CheckResult("output_project",
                           _probe(rng, lambda: output_project(head, ys, reads), [head.w_y, head.w_out, head.b_out]
                                  + ys + reads, max_coords=cap), LAYER_TOL))

    stack = ConvStack.init(rng, default_layers(profile["cnn_channels"]), feature_width=F)
    for t in stack.tensors():
        if t.name.endswith(".b"):
            t.data = rng.normal(size=t.shape) * 0.1
    image = Tensor(rng.uniform(size=(1, 1, 32, 4 * T)))
    label = [[1, 3]]
    cmam = Model("cmam", stack, head)
    out.append(CheckResult(f"full CMAM L=1 T={T}",
                           _split_check(lambda: ctc_loss_batch(cmam.logits(image), label), cmam, cap), COMPOSITE_TOL))
    crnn = Model("crnn", stack, CrnnParams.init(rng, F, max(4, H // 2), V))
    out.append(CheckResult(f"CRNN T={T}",
                           _split_check(lambda: ctc_loss_batch(crnn.logits(image), label), crnn, cap), COMPOSITE_TOL))
    logits = _leaf(rng, (4, 4), "logits")
    out.append(CheckResult("ctc_loss T=4 V=3", gradcheck(lambda: ctc_loss(logits, [1, 2]), [logits]), LAYER_TOL))
    return out


def run_suite(profile: str = "tiny", seed: int = 1234, report: Callable[[str], None] | None = None):
    """Run every check; returns (results, seconds)."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    prof = PROFILES[profile]
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    results = []
    mem = MemoryConfig(prof["mem_slots"], prof["mem_width"], prof["read_heads"])
    for group in (lambda: elementwise_checks(rng), lambda: layer_checks(rng, prof),
                  lambda: memory_checks(rng, mem), lambda: model_checks(rng, prof)):
        for res in group():
            results.append(res)
            if report is not None:
                report(res.line())
    return results, time.perf_counter() - start
