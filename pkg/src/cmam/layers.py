"""Linear, LSTM, convolution and max-pooling layers plus the column encoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (Tensor, add, as_tensor, broadcast_to, getitem, matmul, mul, record, relu, reshape,
                     transpose, unbroadcast)

Params = dict[str, Tensor]


def param(rng: np.random.Generator, shape, scale: float, name: str) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True, name=name)


def zeros_param(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def blend(keep: np.ndarray, new: Tensor, old: Tensor) -> Tensor:
    """``new`` where ``keep`` is 1 and ``old`` where it is 0; ``keep`` broadcasts from the left."""
    k = keep.reshape(keep.shape + (1,) * (new.ndim - keep.ndim))
    return add(mul(new, Tensor(k)), mul(old, Tensor(1.0 - k)))


def step_mask(lengths, t: int) -> np.ndarray | None:
    """Float mask of the batch rows still inside their sequence at step t; None when all are."""
    if lengths is None:
        return None
    live = np.asarray(lengths) > t
    return None if live.all() else live.astype(np.float64)


def linear(w: Tensor, b: Tensor | None, x: Tensor) -> Tensor:
    """``x @ w + b`` on row vectors; ``w`` is stored (in, out)."""
    x = as_tensor(x)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    y = matmul(x, w)
    return y if b is None else y + b


# -- LSTM -------------------------------------------------------------------

@dataclass
class LstmParams:
    input_size: int
    hidden_size: int
    w: Tensor   # (input + hidden, 4 * hidden), gate blocks [i, f, o, g]
    b: Tensor   # (4 * hidden,)
    h0: Tensor
    c0: Tensor

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator, name: str = "lstm"):
        scale = 1.0 / np.sqrt(hidden_size)
        w = param(rng, (input_size + hidden_size, 4 * hidden_size), scale, f"{name}.w")
        b = zeros_param((4 * hidden_size,), f"{name}.b")
        b.data[hidden_size:2 * hidden_size] = 1.0
        return cls(input_size, hidden_size, w, b,
                   zeros_param((hidden_size,), f"{name}.h0"),
                   zeros_param((hidden_size,), f"{name}.c0"))

    def tensors(self) -> list[Tensor]:
        return [self.w, self.b, self.h0, self.c0]


def _sig(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """One fused LSTM update; returns ``[h', c']`` concatenated on the last axis."""
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    H = h.shape[-1]
    if x.shape[-1] + H != w.shape[0]:
        raise ValueError(f"lstm: input {x.shape[-1]} + hidden {H} != weight rows {w.shape[0]}")
    batch = np.broadcast_shapes(x.shape[:-1], h.shape[:-1])
    xh = np.concatenate([np.broadcast_to(x.data, batch + x.shape[-1:]),
                         np.broadcast_to(h.data, batch + (H,))], axis=-1)
    z = xh @ w.data + b.data
    i = _sig(z[..., :H])
    f = _sig(z[..., H:2 * H])
    o = _sig(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:])
    c_new = f * c.data + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    def bw(grad):
        gh, gc = grad[..., :H], grad[..., H:]
        gct = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            gct * g * i * (1.0 - i),
            gct * c.data * f * (1.0 - f),
            gh * tc * o * (1.0 - o),
            gct * i * (1.0 - g * g),
        ], axis=-1)
        dz2 = dz.reshape(-1, 4 * H)
        gw = xh.reshape(-1, xh.shape[-1]).T @ dz2
        gb = dz2.sum(0)
        dxh = dz @ w.data.T
        gx = dxh[..., :x.shape[-1]]
        ghp = dxh[..., x.shape[-1]:]
        return (unbroadcast(gx, x.shape), unbroadcast(ghp, h.shape),
                unbroadcast(gct * f, c.shape), gw, gb)

    return record(np.concatenate([h_new, c_new], axis=-1), (x, h, c, w, b), bw)


def lstm_step(p: LstmParams, x: Tensor, h_prev: Tensor, c_prev: Tensor):
    """Returns ``(h, c, o)``; the output is the hidden state itself."""
    x = as_tensor(x)
    if x.shape[-1] != p.input_size:
        raise ValueError(f"lstm_step: input width {x.shape[-1]} != {p.input_size}")
    hc = lstm_cell(x, h_prev, c_prev, p.w, p.b)
    H = p.hidden_size
    h = getitem(hc, (Ellipsis, slice(0, H)))
    c = getitem(hc, (Ellipsis, slice(H, 2 * H)))
    return h, c, h


def lstm_initial(p: LstmParams, batch_shape: tuple[int, ...]):
    if not batch_shape:
        return p.h0, p.c0
    shape = batch_shape + (p.hidden_size,)
    return broadcast_to(p.h0, shape), broadcast_to(p.c0, shape)


def lstm_sequence(p: LstmParams, xs: list[Tensor], reverse: bool = False, lengths=None) -> list[Tensor]:
    """Run the cell over ``xs`` and return outputs in the input's index order.

    With per-row ``lengths`` the state is frozen past each row's end, so a
    reverse sweep starts from the initial state at that row's last step.
    """
    h, c = lstm_initial(p, xs[0].shape[:-1])
    out: list[Tensor] = [None] * len(xs)  # type: ignore[list-item]
    order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    for t in order:
        h_new, c_new, _ = lstm_step(p, xs[t], h, c)
        keep = step_mask(lengths, t)
        if keep is None:
            h, c = h_new, c_new
        else:
            h, c = blend(keep, h_new, h), blend(keep, c_new, c)
        out[t] = h
    return out


# -- convolution --------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. x: (B, C, H, W), w: (O, C, kh, kw) -> (B, O, H', W')."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ValueError(f"conv2d: input has {C} channels, kernel expects {Cw}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"conv2d: non-positive output extent {Ho}x{Wo} for input {H}x{W}, "
                         f"kernel {kh}x{kw}, padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(w.shape)
        gb = g2.sum(0) if b is not None else None
        gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + H, padding:padding + W]
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, bw)


def maxpool2d(x: Tensor, window: tuple[int, int], stride: tuple[int, int] | None = None) -> Tensor:
    """Max over windows; ragged edges are truncated.  Ties route to the first index."""
    x = as_tensor(x)
    ph, pw = window
    sh, sw = stride or window
    B, C, H, W = x.shape
    if ph > H or pw > W:
        raise ValueError(f"maxpool2d: window {ph}x{pw} larger than input {H}x{W}")
    Ho = (H - ph) // sh + 1
    Wo = (W - pw) // sw + 1
    win = sliding_window_view(x.data, (ph, pw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, ph * pw)
    arg = flat.argmax(-1)
    out = np.take_along_axis(flat, arg[..., None], -1)[..., 0]

    def bw(g):
        if (sh, sw) == (ph, pw):
            gw_ = np.zeros((B, C, Ho, Wo, ph * pw))
            np.put_along_axis(gw_, arg[..., None], g[..., None], -1)
            gw_ = gw_.reshape(B, C, Ho, Wo, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * ph, Wo * pw)
            gx = np.zeros_like(x.data)
            gx[:, :, :Ho * ph, :Wo * pw] = gw_
            return (gx,)
        gx = np.zeros_like(x.data)
        bi, ci, hi, wi = np.indices((B, C, Ho, Wo))
        rows = hi * sh + arg // pw
        cols_ = wi * sw + arg % pw
        np.add.at(gx, (bi, ci, rows, cols_), g)
        return (gx,)

    return record(out, (x,), bw)


# -- CNN column encoder --------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str                      # "conv" | "pool"
    channels: int = 0
    kernel: tuple[int, int] = (3, 3)
    padding: int = 1
    window: tuple[int, int] = (2, 2)
    activation: str | None = "relu"


def default_layers(channels=(16, 32, 48, 64)) -> list[LayerSpec]:
    c1, c2, c3, c4 = channels
    return [
        LayerSpec("conv", c1), LayerSpec("pool", window=(2, 2)),
        LayerSpec("conv", c2), LayerSpec("pool", window=(2, 2)),
        LayerSpec("conv", c3), LayerSpec("pool", window=(2, 1)),
        LayerSpec("conv", c4), LayerSpec("pool", window=(2, 1)),
    ]


@dataclass
class ConvStack:
    layers: list[LayerSpec]
    in_height: int
    feature_width: int
    name: str = "cnn"
    params: Params = field(default_factory=dict)

    @classmethod
    def init(cls, rng: np.random.Generator, layers: list[LayerSpec] | None = None,
             in_height: int = 32, feature_width: int = 64, name: str = "cnn") -> "ConvStack":
        layers = layers if layers is not None else default_layers()
        stack = cls(list(layers), in_height, feature_width, name)
        ch = 1
        for i, spec in enumerate(stack.layers):
            if spec.kind == "conv":
                kh, kw = spec.kernel
                fan_in = ch * kh * kw
                stack.params[f"{name}.conv{i}.w"] = param(
                    rng, (spec.channels, ch, kh, kw), np.sqrt(6.0 / fan_in), f"{name}.conv{i}.w")
                stack.params[f"{name}.conv{i}.b"] = zeros_param((spec.channels,), f"{name}.conv{i}.b")
                ch = spec.channels
        c, h = stack.column_shape()
        n_in = c * h
        stack.params[f"{name}.proj.w"] = param(rng, (n_in, feature_width), np.sqrt(6.0 / (n_in + feature_width)),
                                               f"{name}.proj.w")
        stack.params[f"{name}.proj.b"] = zeros_param((feature_width,), f"{name}.proj.b")
        return stack

    def column_shape(self) -> tuple[int, int]:
        """(channels, rows) of the final feature map."""
        ch, h = 1, self.in_height
        for spec in self.layers:
            if spec.kind == "conv":
                ch = spec.channels
                h = h + 2 * spec.padding - spec.kernel[0] + 1
            else:
                h = (h - spec.window[0]) // spec.window[0] + 1
        return ch, h

    def out_width(self, width: int) -> int:
        """Number of feature columns T for an input of the given width."""
        w = width
        for spec in self.layers:
            w = _width_after(spec, w)
        return w

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())


def _width_after(spec: LayerSpec, w: np.ndarray) -> np.ndarray:
    if spec.kind == "conv":
        return w + 2 * spec.padding - spec.kernel[1] + 1
    return (w - spec.window[1]) // spec.window[1] + 1


def feature_map(stack: ConvStack, images: Tensor, widths=None) -> Tensor:
    """Apply conv/pool layers to (B, 1, H, W) images.

    ``widths`` gives each image's true width inside a right-padded batch;
    columns past it are zeroed after every layer so padding never reaches
    the valid columns.
    """
    prefix = stack.name
    h = images
    w = None if widths is None else np.asarray(widths)
    for i, spec in enumerate(stack.layers):
        if spec.kind == "conv":
            h = conv2d(h, stack.params[f"{prefix}.conv{i}.w"], stack.params[f"{prefix}.conv{i}.b"],
                       padding=spec.padding)
            if spec.activation == "relu":
                h = relu(h)
        elif spec.kind == "pool":
            h = maxpool2d(h, spec.window)
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
        if w is not None:
            w = _width_after(spec, w)
            cols = np.arange(h.shape[-1])[None, :] < w[:, None]
            if not cols.all():
                h = mul(h, Tensor(cols[:, None, None, :].astype(np.float64)))
    return h


def cnn_encode(stack: ConvStack, image, widths=None) -> Tensor:
    """Encode grayscale ink images into a column feature sequence.

    ``image`` is (H, W), (1, H, W) or a batch (B, 1, H, W) with ink = 1,
    optionally right-padded with per-image ``widths``.
    Returns (T, F) for a single image or (B, T, F) for a batch.
    """
    img = as_tensor(image)
    single = img.ndim < 4
    if img.ndim == 2:
        img = reshape(img, (1, 1) + img.shape)
    elif img.ndim == 3:
        img = reshape(img, (1,) + img.shape)
    if img.shape[2] != stack.in_height:
        raise ValueError(f"cnn_encode: image height {img.shape[2]} != configured {stack.in_height}")
    fmap = feature_map(stack, img, widths)              # (B, C, Hf, T)
    B, C, Hf, T = fmap.shape
    cols = reshape(transpose(fmap, (0, 3, 1, 2)), (B, T, C * Hf))
    prefix = stack.name
    x = linear(stack.params[f"{prefix}.proj.w"], stack.params[f"{prefix}.proj.b"], cols)
    return reshape(x, (T, stack.feature_width)) if single else x
