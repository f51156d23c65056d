"""Procedural handwritten-looking text lines.

Pipeline: draw a label corpus, render each label with per-glyph style jitter,
lay glyphs along a wobbly baseline, contrast-normalize, then slant and add
pixel noise.  Images use ink = 1 on a 0 background; on disk they are stored
as dark ink on white 8-bit PGM.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

HEIGHT = 32
CELL = 32
CELL_PAD = 8          # cell columns left of the pen position


# -- glyphs ---------------------------------------------------------------------

# Stroke programs on a unit box (x right, y down).  ("L", x0, y0, x1, y1) is a
# line, ("A", cx, cy, rx, ry, start_deg, end_deg) an elliptic arc.
BASE_GLYPHS: list[tuple[str, list[tuple]]] = [
    ("bar", [("L", .5, 0, .5, 1)]),
    ("dash", [("L", 0, .5, 1, .5)]),
    ("slash", [("L", 1, 0, 0, 1)]),
    ("backslash", [("L", 0, 0, 1, 1)]),
    ("plus", [("L", .5, 0, .5, 1), ("L", 0, .5, 1, .5)]),
    ("cross", [("L", 0, 0, 1, 1), ("L", 1, 0, 0, 1)]),
    ("ring", [("A", .5, .5, .5, .5, 0, 360)]),
    ("cup", [("A", .5, .25, .5, .75, 0, 180)]),
    ("cap", [("A", .5, .75, .5, .75, 180, 360)]),
    ("hook", [("L", .5, 0, .5, .7), ("A", .25, .7, .25, .3, 0, 180)]),
    ("tee", [("L", 0, 0, 1, 0), ("L", .5, 0, .5, 1)]),
    ("ell", [("L", 0, 0, 0, 1), ("L", 0, 1, 1, 1)]),
    ("vee", [("L", 0, 0, .5, 1), ("L", .5, 1, 1, 0)]),
    ("wedge", [("L", 0, 1, .5, 0), ("L", .5, 0, 1, 1)]),
    ("zig", [("L", 0, 0, 1, 0), ("L", 1, 0, 0, 1), ("L", 0, 1, 1, 1)]),
    ("loop", [("L", 0, 1, 0, 0), ("A", .5, .3, .5, .3, 180, 450)]),
    ("gate", [("L", 0, 0, 0, 1), ("L", 1, 0, 1, 1), ("L", 0, 0, 1, 0)]),
    ("ess", [("A", .5, .25, .45, .25, 0, 270), ("A", .5, .75, .45, .25, -90, 180)]),
    ("eye", [("A", .5, .6, .5, .4, 0, 360), ("L", .5, 0, .5, .1)]),
    ("fork", [("L", .5, 1, .5, .5), ("L", .5, .5, 0, 0), ("L", .5, .5, 1, 0)]),
]

EXTRA_MARKS: list[tuple[str, list[tuple]]] = [
    ("dot", [("A", .5, -.15, .08, .06, 0, 360)]),
    ("over", [("L", 0, -.15, 1, -.15)]),
    ("tick", [("L", .8, -.2, 1, 0)]),
    ("under", [("L", 0, 1.1, 1, 1.1)]),
    ("tail", [("L", 1, 1, 1.1, 1.2)]),
]


@dataclass(frozen=True)
class GlyphStyle:
    """Jitter ranges applied independently to every rendered glyph."""
    rotation_deg: float = 6.0
    shear: float = 0.2
    thickness: tuple[float, float] = (1.3, 2.3)
    scale: tuple[float, float] = (0.85, 1.15)
    wobble: float = 0.03          # additive stroke noise, in box units

    @classmethod
    def none(cls) -> "GlyphStyle":
        return cls(0.0, 0.0, (1.8, 1.8), (1.0, 1.0), 0.0)


@dataclass(frozen=True)
class GlyphSpec:
    index: int
    name: str
    strokes: tuple[tuple, ...]


def glyph_alphabet(vocab_size: int) -> list[GlyphSpec]:
    """Glyphs for classes 1..V; beyond the base set, base glyphs gain a mark."""
    if vocab_size < 1:
        raise ValueError("vocab size must be positive")
    nb, nm = len(BASE_GLYPHS), len(EXTRA_MARKS)
    if vocab_size > nb * (nm + 1):
        raise ValueError(f"at most {nb * (nm + 1)} procedural glyphs available")
    out = []
    for k in range(vocab_size):
        name, strokes = BASE_GLYPHS[k % nb]
        tier = k // nb
        if tier:
            mark_name, mark = EXTRA_MARKS[tier - 1]
            name, strokes = f"{name}+{mark_name}", strokes + mark
        out.append(GlyphSpec(k + 1, name, tuple(strokes)))
    return out


def _stroke_points(strokes, step: float = 0.02) -> np.ndarray:
    pts = []
    for s in strokes:
        if s[0] == "L":
            _, x0, y0, x1, y1 = s
            n = max(2, int(np.hypot(x1 - x0, y1 - y0) / step) + 1)
            t = np.linspace(0.0, 1.0, n)
            pts.append(np.stack([x0 + (x1 - x0) * t, y0 + (y1 - y0) * t], 1))
        elif s[0] == "A":
            _, cx, cy, rx, ry, a0, a1 = s
            n = max(3, int(np.deg2rad(abs(a1 - a0)) * max(rx, ry) / step) + 1)
            th = np.deg2rad(np.linspace(a0, a1, n))
            pts.append(np.stack([cx + rx * np.cos(th), cy + ry * np.sin(th)], 1))
        else:
            raise ValueError(f"unknown stroke kind {s[0]!r}")
    return np.concatenate(pts)


_YY, _XX = np.mgrid[0:CELL, 0:CELL] + 0.5


def render_glyph(glyph: GlyphSpec, style: GlyphStyle, rng: np.random.Generator,
                 box_width: float, box_height: float = 18.0, top: float = 7.0) -> np.ndarray:
    """Rasterize one glyph into a CELL x CELL ink cell; the box starts at column CELL_PAD."""
    pts = _stroke_points(glyph.strokes)
    if style.wobble:
        pts = pts + rng.uniform(-style.wobble, style.wobble, size=pts.shape)
    rot = np.deg2rad(rng.uniform(-style.rotation_deg, style.rotation_deg)) if style.rotation_deg else 0.0
    shear = rng.uniform(-style.shear, style.shear) if style.shear else 0.0
    thick = rng.uniform(*style.thickness)
    # box coordinates centred, scaled to pixels
    x = (pts[:, 0] - 0.5) * box_width
    y = (pts[:, 1] - 0.5) * box_height
    x = x + shear * y
    c, s = np.cos(rot), np.sin(rot)
    x, y = c * x - s * y, s * x + c * y
    x = np.clip(x + CELL_PAD + box_width / 2, 0.5, CELL - 0.5)
    y = np.clip(y + top + box_height / 2, 0.5, CELL - 0.5)
    d2 = (_XX[..., None] - x) ** 2 + (_YY[..., None] - y) ** 2
    d = np.sqrt(d2.min(-1))
    return np.clip(thick / 2 + 0.5 - d, 0.0, 1.0)


# -- corpus -----------------------------------------------------------------------

def make_corpus(seed: int, vocab_size: int, n_lines: int, length: tuple[int, int] = (5, 25),
                zipf: float = 1.1) -> list[list[int]]:
    """Label sequences with uniform lengths in ``length`` and Zipf-skewed classes."""
    lo, hi = length
    if vocab_size < 2:
        raise ValueError("vocab size must be at least 2")
    if n_lines < 1:
        raise ValueError("need at least one line")
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid length bounds {length}")
    rng = np.random.default_rng([seed, 0])
    p = 1.0 / np.arange(1, vocab_size + 1) ** zipf
    p /= p.sum()
    out = []
    for _ in range(n_lines):  # one line at a time, so longer corpora extend shorter ones
        n = int(rng.integers(lo, hi + 1))
        out.append((rng.choice(vocab_size, size=n, p=p) + 1).tolist())
    return out


# -- line rendering -------------------------------------------------------------------

@dataclass(frozen=True)
class RenderConfig:
    glyph: GlyphStyle = field(default_factory=GlyphStyle)
    box_width: float = 12.0
    spacing: tuple[int, int] = (1, 4)
    baseline_jitter: int = 2
    margin: int = 4
    slant_deg: float = 5.0
    noise_sigma: float = 0.05

    @classmethod
    def clean(cls, spacing: int = 2) -> "RenderConfig":
        return cls(GlyphStyle.none(), spacing=(spacing, spacing), baseline_jitter=0,
                   slant_deg=0.0, noise_sigma=0.0)

    def advance_bounds(self) -> tuple[int, int]:
        lo, hi = self.glyph.scale
        return (int(round(self.box_width * lo)) + self.spacing[0],
                int(round(self.box_width * hi)) + self.spacing[1])

    def width_bounds(self, n: int) -> tuple[int, int]:
        a, b = self.advance_bounds()
        return n * a + 2 * self.margin, n * b + 2 * self.margin


@dataclass
class LineSample:
    image: np.ndarray        # (32, W) ink intensities in [0, 1]
    label: list[int]
    id: int = 0


def render_line(labels: Sequence[int], glyphs: Sequence[GlyphSpec] | dict[int, GlyphSpec],
                rng: np.random.Generator, config: RenderConfig = RenderConfig(),
                sample_id: int = 0) -> LineSample:
    table = glyphs if isinstance(glyphs, dict) else {g.index: g for g in glyphs}
    missing = [c for c in labels if c not in table]
    if missing:
        raise KeyError(f"no glyph for classes {sorted(set(missing))}")
    if not labels:
        raise ValueError("cannot render an empty label")
    lo, hi = config.glyph.scale
    widths, gaps = [], []
    for _ in labels:
        widths.append(int(round(config.box_width * rng.uniform(lo, hi))))
        gaps.append(int(rng.integers(config.spacing[0], config.spacing[1] + 1)))
    W = 2 * config.margin + sum(widths) + sum(gaps)
    canvas = np.zeros((HEIGHT, W))
    pen = config.margin
    for c, gw, gap in zip(labels, widths, gaps):
        dy = int(rng.integers(-config.baseline_jitter, config.baseline_jitter + 1)) if config.baseline_jitter else 0
        cell = render_glyph(table[c], config.glyph, rng, gw, top=7.0 + dy)
        x0 = pen - CELL_PAD
        a, b = max(x0, 0), min(x0 + CELL, W)
        canvas[:, a:b] = np.maximum(canvas[:, a:b], cell[:, a - x0:b - x0])
        pen += gw + gap
    img = normalize(canvas)
    img = augment(img, rng, config)
    return LineSample(img, list(labels), sample_id)


def normalize(img: np.ndarray) -> np.ndarray:
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)


def augment(img: np.ndarray, rng: np.random.Generator, config: RenderConfig) -> np.ndarray:
    out = img
    if config.slant_deg:
        shift = np.tan(np.deg2rad(rng.uniform(-config.slant_deg, config.slant_deg)))
        cols = np.arange(img.shape[1], dtype=float)
        out = np.empty_like(img)
        for r in range(img.shape[0]):
            out[r] = np.interp(cols + shift * (r - HEIGHT / 2), cols, img[r], left=0.0, right=0.0)
    if config.noise_sigma:
        sigma = rng.uniform(0.0, config.noise_sigma)
        out = np.clip(out + rng.normal(0.0, sigma, size=out.shape), 0.0, 1.0)
    return out


def sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, sample_id])


def generate(seed: int, vocab_size: int, n_lines: int, length: tuple[int, int] = (5, 25),
             config: RenderConfig = RenderConfig()) -> list[LineSample]:
    glyphs = glyph_alphabet(vocab_size)
    corpus = make_corpus(seed, vocab_size, n_lines, length)
    return [render_line(lab, glyphs, sample_rng(seed, i), config, sample_id=i) for i, lab in enumerate(corpus)]


# -- storage ------------------------------------------------------------------------

def quantize(img: np.ndarray) -> np.ndarray:
    """Ink image -> 8-bit dark-on-white pixels."""
    return np.round((1.0 - np.clip(img, 0.0, 1.0)) * 255.0).astype(np.uint8)


def dequantize(pix: np.ndarray) -> np.ndarray:
    return 1.0 - pix.astype(np.float64) / 255.0


def write_pgm(path, pix: np.ndarray):
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pix, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


@dataclass
class Dataset:
    samples: list[LineSample]
    vocab: list[str]
    root: Path | None = None


def emit_dataset(samples: Sequence[LineSample], directory, vocab: Sequence[str],
                 meta: dict | None = None) -> Path:
    """Write PGM images, ``manifest.tsv`` and ``vocab.txt``; returns the manifest path."""
    root = Path(directory)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        lines = []
        for s in samples:
            rel = f"images/{s.id:06d}.pgm"
            write_pgm(root / rel, quantize(s.image))
            lines.append(f"{rel}\t{' '.join(str(c) for c in s.label)}\n")
        manifest = root / "manifest.tsv"
        manifest.write_text("".join(lines), encoding="utf-8")
        (root / "vocab.txt").write_text("".join(f"{v}\n" for v in vocab), encoding="utf-8")
        if meta is not None:
            (root / "generator.cfg").write_text("".join(f"{k} = {v}\n" for k, v in meta.items()),
                                                encoding="utf-8")
    except OSError as e:
        raise OSError(f"writing dataset under {root}: {e}") from e
    return manifest


def read_vocab(path) -> list[str]:
    return [line.rstrip("\n") for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    manifest = root / "manifest.tsv"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest.tsv in {root}")
    samples = []
    for n, line in enumerate(manifest.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            rel, labels = line.split("\t")
            label = [int(c) for c in labels.split()]
        except ValueError:
            raise ValueError(f"{manifest}:{n + 1}: malformed record {line!r}") from None
        stem = os.path.splitext(os.path.basename(rel))[0]
        sid = int(stem) if stem.isdigit() else n
        samples.append(LineSample(dequantize(read_pgm(root / rel)), label, sid))
    return Dataset(samples, read_vocab(root / "vocab.txt"), root)


def generate_dataset(seed: int, vocab_size: int, n_lines: int, out, length: tuple[int, int] = (5, 25),
                     config: RenderConfig = RenderConfig()) -> Path:
    samples = generate(seed, vocab_size, n_lines, length, config)
    vocab = [g.name for g in glyph_alphabet(vocab_size)]
    meta = {"seed": seed, "vocab_size": vocab_size, "lines": n_lines,
            "min_length": length[0], "max_length": length[1]}
    return emit_dataset(samples, out, vocab, meta)


def regenerate(directory) -> list[LineSample]:
    """Re-render a dataset from its generator.cfg (labels come from the manifest)."""
    root = Path(directory)
    meta = {}
    for line in (root / "generator.cfg").read_text(encoding="utf-8").splitlines():
        k, v = (s.strip() for s in line.split("=", 1))
        meta[k] = int(v)
    ds = load_dataset(root)
    glyphs = glyph_alphabet(meta["vocab_size"])
    return [render_line(s.label, glyphs, sample_rng(meta["seed"], s.id), sample_id=s.id) for s in ds.samples]

