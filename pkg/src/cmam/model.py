"""Bidirectional-controller memory network with refinement passes, and a CRNN baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import ConvStack, LstmParams, blend, cnn_encode, linear, lstm_initial, lstm_sequence, lstm_step, \
    param, step_mask, zeros_param
from .memory import MemoryConfig, MemoryState, mam_step
from .tensor import Tensor, as_tensor, broadcast_to, concat, getitem, reshape, stack


def _glorot(rng, shape, name):
    return param(rng, shape, np.sqrt(6.0 / (shape[0] + shape[1])), name)


@dataclass
class CmamParams:
    mem: MemoryConfig
    input_width: int          # |x| == |y^s|
    hidden: int
    vocab_size: int
    refinements: int
    lstm_f: LstmParams
    lstm_b: LstmParams
    w_xi: Tensor              # (2H, interface width)
    w_s: Tensor               # (2H, input width)
    w_y: Tensor               # (input width + R*D, input width)
    w_out: Tensor             # (input width, V + 1)
    b_out: Tensor
    r0: Tensor                # (R*D,)

    @classmethod
    def init(cls, rng: np.random.Generator, mem: MemoryConfig, input_width: int, hidden: int,
             vocab_size: int, refinements: int = 1, name: str = "cmam") -> "CmamParams":
        RD = mem.read_heads * mem.width
        return cls(
            mem, input_width, hidden, vocab_size, refinements,
            LstmParams.init(input_width + RD, hidden, rng, f"{name}.lstm_f"),
            LstmParams.init(input_width, hidden, rng, f"{name}.lstm_b"),
            _glorot(rng, (2 * hidden, mem.interface_width), f"{name}.w_xi"),
            _glorot(rng, (2 * hidden, input_width), f"{name}.w_s"),
            _glorot(rng, (input_width + RD, input_width), f"{name}.w_y"),
            _glorot(rng, (input_width, vocab_size + 1), f"{name}.w_out"),
            zeros_param((vocab_size + 1,), f"{name}.b_out"),
            param(rng, (RD,), 0.1, f"{name}.r0"),
        )

    def tensors(self) -> list[Tensor]:
        return (self.lstm_f.tensors() + self.lstm_b.tensors()
                + [self.w_xi, self.w_s, self.w_y, self.w_out, self.b_out, self.r0])


def _steps(xs) -> list[Tensor]:
    if isinstance(xs, (list, tuple)):
        return list(xs)
    xs = as_tensor(xs)
    return [getitem(xs, (Ellipsis, t, slice(None))) for t in range(xs.shape[-2])]


def backward_sweep(p: CmamParams, ys_prev: list[Tensor], lengths=None) -> list[Tensor]:
    """Backward controller from t=T down to 1 on the previous level's outputs only."""
    for y in ys_prev:
        if y.shape[-1] != p.input_width:
            raise ValueError(f"backward_sweep: input width {y.shape[-1]} != {p.input_width}")
    return lstm_sequence(p.lstm_b, ys_prev, reverse=True, lengths=lengths)


def _hold(keep: np.ndarray, new: MemoryState, old: MemoryState) -> MemoryState:
    return MemoryState(*(blend(keep, getattr(new, f), getattr(old, f))
                         for f in ("memory", "usage", "read_weights", "write_weight", "read_values")))


def forward_sweep(p: CmamParams, ys_prev: list[Tensor], ob: list[Tensor], state: MemoryState,
                  trace: dict | None = None, lengths=None):
    """Forward controller pass with one write-then-read memory step per column.

    Returns ``(of, xi, ys, reads, state)``.  Memory state is carried in and
    out unchanged in kind, so it persists across refinement levels.  Rows
    past their ``lengths`` leave controller and memory untouched.
    """
    batch = ys_prev[0].shape[:-1]
    h, c = lstm_initial(p.lstm_f, batch)
    r = broadcast_to(p.r0, batch + p.r0.shape) if batch else p.r0
    ofs, xis, yss, reads = [], [], [], []
    for t, y_in in enumerate(ys_prev):
        h_new, c_new, of = lstm_step(p.lstm_f, concat([y_in, r], axis=-1), h, c)
        both = concat([of, ob[t]], axis=-1)
        xi = linear(p.w_xi, None, both)
        ys = linear(p.w_s, None, both)
        new_state, r_new = mam_step(state, xi, p.mem)
        keep = step_mask(lengths, t)
        if keep is None:
            h, c, state, r = h_new, c_new, new_state, r_new
        else:
            h, c, r = blend(keep, h_new, h), blend(keep, c_new, c), blend(keep, r_new, r)
            state = _hold(keep, new_state, state)
        ofs.append(of)
        xis.append(xi)
        yss.append(ys)
        reads.append(r)
    if trace is not None:
        trace.setdefault("forward_sweeps", 0)
        trace["forward_sweeps"] += 1
    return ofs, xis, yss, reads, state


def run_refinements(p: CmamParams, xs, trace: dict | None = None, state: MemoryState | None = None,
                    lengths=None):
    """L+1 passes (backward sweep then forward sweep) over a shared memory.

    Level 0 consumes the encoder features; level l consumes level l-1's
    short-term outputs.  Controllers restart from their learned initial
    states each level; memory, usage and read weights do not.
    """
    ys = _steps(xs)
    if ys[0].shape[-1] != p.input_width:
        raise ValueError(f"run_refinements: feature width {ys[0].shape[-1]} != {p.input_width}")
    if state is None:
        state = MemoryState.initial(p.mem, ys[0].shape[:-1])
    reads: list[Tensor] = []
    for level in range(p.refinements + 1):
        if trace is not None:
            trace.setdefault("memory_in", []).append(state.memory.data.copy())
            trace.setdefault("inputs", []).append(ys)
            trace["backward_sweeps"] = trace.get("backward_sweeps", 0) + 1
        ob = backward_sweep(p, ys, lengths)
        _, _, ys, reads, state = forward_sweep(p, ys, ob, state, trace, lengths)
        if trace is not None:
            trace.setdefault("memory_out", []).append(state.memory.data.copy())
    if trace is not None:
        trace["final_state"] = state
    return ys, reads


def output_project(p: CmamParams, ys: list[Tensor], reads: list[Tensor]) -> Tensor:
    """y_t = W_y [y^s_t, r_t] followed by the classifier; returns (..., T, V+1) logits."""
    seq = concat([stack(ys, axis=-2), stack(reads, axis=-2)], axis=-1)
    y = linear(p.w_y, None, seq)
    return linear(p.w_out, p.b_out, y)


def _frames(cnn: ConvStack, widths):
    return None if widths is None else [cnn.out_width(int(w)) for w in widths]


def cmam_forward(cnn: ConvStack, p: CmamParams, image, trace: dict | None = None, widths=None) -> Tensor:
    x = cnn_encode(cnn, image, widths)
    ys, reads = run_refinements(p, x, trace, lengths=_frames(cnn, widths))
    return output_project(p, ys, reads)


# -- CRNN baseline ---------------------------------------------------------------

@dataclass
class CrnnParams:
    input_width: int
    hidden: int
    vocab_size: int
    layers: list[tuple[LstmParams, LstmParams]]
    w_out: Tensor
    b_out: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, input_width: int, hidden: int, vocab_size: int,
             depth: int = 2, name: str = "crnn") -> "CrnnParams":
        layers = []
        n_in = input_width
        for i in range(depth):
            layers.append((LstmParams.init(n_in, hidden, rng, f"{name}.l{i}.fwd"),
                           LstmParams.init(n_in, hidden, rng, f"{name}.l{i}.bwd")))
            n_in = 2 * hidden
        return cls(input_width, hidden, vocab_size, layers,
                   _glorot(rng, (2 * hidden, vocab_size + 1), f"{name}.w_out"),
                   zeros_param((vocab_size + 1,), f"{name}.b_out"))

    def tensors(self) -> list[Tensor]:
        out = []
        for f, b in self.layers:
            out += f.tensors() + b.tensors()
        return out + [self.w_out, self.b_out]


def bilstm_stack(p: CrnnParams, xs, lengths=None) -> list[Tensor]:
    seq = _steps(xs)
    for fwd, bwd in p.layers:
        of = lstm_sequence(fwd, seq, lengths=lengths)
        ob = lstm_sequence(bwd, seq, reverse=True, lengths=lengths)
        seq = [concat([a, b], axis=-1) for a, b in zip(of, ob)]
    return seq


def crnn_forward(cnn: ConvStack, p: CrnnParams, image, widths=None) -> Tensor:
    x = cnn_encode(cnn, image, widths)
    seq = bilstm_stack(p, x, _frames(cnn, widths))
    return linear(p.w_out, p.b_out, stack(seq, axis=-2))


# -- model bundle -------------------------------------------------------------------

@dataclass
class Model:
    """Encoder plus sequence head, addressable by stable parameter names."""
    kind: str                         # "cmam" | "crnn"
    cnn: ConvStack
    head: CmamParams | CrnnParams
    named: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not self.named:
            for t in self.cnn.tensors() + self.head.tensors():
                if t.name in self.named:
                    raise ValueError(f"duplicate parameter name {t.name}")
                self.named[t.name] = t

    @property
    def vocab_size(self) -> int:
        return self.head.vocab_size

    def logits(self, images, trace: dict | None = None, widths=None) -> Tensor:
        """(B, T, V+1) logits; ``widths`` marks the true width of each right-padded image."""
        if self.kind == "cmam":
            return cmam_forward(self.cnn, self.head, images, trace, widths)
        return crnn_forward(self.cnn, self.head, images, widths)

    def parameters(self) -> list[Tensor]:
        return list(self.named.values())

