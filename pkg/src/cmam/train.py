"""Training and evaluation loops."""

from __future__ import annotations

import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, TrainConfig, config_diff, parse_config
from .ctc import ctc_loss_batch, greedy_decode, min_frames
from .layers import ConvStack, default_layers
from .memory import MemoryConfig
from .metrics import MetricReport, edit_ops, report
from .model import CmamParams, CrnnParams, Model
from .optim import RMSProp
from .synth import Dataset, LineSample, load_dataset
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

STEP_KEY = "train.step"
ACC_PREFIX = "rmsprop."


def build_model(cfg: TrainConfig) -> Model:
    rng = np.random.default_rng([cfg.seed, 1])
    cnn = ConvStack.init(rng, default_layers(cfg.cnn_channels), feature_width=cfg.feature_width)
    if cfg.model == "cmam":
        mem = MemoryConfig(cfg.mem_slots, cfg.mem_width, cfg.read_heads)
        head = CmamParams.init(rng, mem, cfg.feature_width, cfg.hidden, cfg.vocab_size, cfg.refinements)
    else:
        head = CrnnParams.init(rng, cfg.feature_width, cfg.hidden, cfg.vocab_size)
    return Model(cfg.model, cnn, head)


# -- batching --------------------------------------------------------------------

def pad_batch(images: Sequence[np.ndarray]) -> Tensor:
    """Right-pad (32, W_i) ink images with background into (B, 1, 32, W_max)."""
    W = max(im.shape[1] for im in images)
    out = np.zeros((len(images), 1, images[0].shape[0], W))
    for i, im in enumerate(images):
        out[i, 0, :, :im.shape[1]] = im
    return Tensor(out)


def bucket_batches(widths: Sequence[int], batch_size: int, rng: np.random.Generator | None = None) -> list[list[int]]:
    """Group indices of similar width; batch order is shuffled when ``rng`` is given."""
    idx = np.arange(len(widths))
    if rng is not None:
        idx = rng.permutation(len(widths))
    order = idx[np.argsort(np.asarray(widths)[idx], kind="stable")]
    batches = [order[i:i + batch_size].tolist() for i in range(0, len(order), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def feasible(model: Model, sample: LineSample) -> bool:
    return min_frames(sample.label) <= model.cnn.out_width(sample.image.shape[1])


# -- evaluation --------------------------------------------------------------------

def decode_samples(model: Model, samples: Sequence[LineSample], batch_size: int = 8) -> list[list[int]]:
    """Greedy transcriptions, batched by width; each line decodes only its own frames."""
    hyps: list[list[int]] = [[] for _ in samples]
    for batch in bucket_batches([s.image.shape[1] for s in samples], batch_size):
        widths = [samples[i].image.shape[1] for i in batch]
        logits = model.logits(pad_batch([samples[i].image for i in batch]), widths=widths).data
        for row, i in enumerate(batch):
            T = model.cnn.out_width(samples[i].image.shape[1])
            hyps[i] = greedy_decode(logits[row, :T])
    return hyps


def evaluate_model(model: Model, samples: Sequence[LineSample], batch_size: int = 8):
    hyps = decode_samples(model, samples, batch_size)
    return report([s.label for s in samples], hyps), hyps


# -- checkpoints -----------------------------------------------------------------------

def model_tensors(model: Model, opt: RMSProp | None = None) -> dict[str, np.ndarray]:
    out = {k: t.data for k, t in model.named.items()}
    if opt is not None:
        out.update({ACC_PREFIX + k: a for k, a in opt.accumulators.items()})
        out[STEP_KEY] = np.array(float(opt.steps))
    return out


def save_checkpoint(path, model: Model, cfg: TrainConfig, opt: RMSProp | None = None):
    return ckpt.save(path, model_tensors(model, opt), cfg.to_text())


def restore(path, expect: TrainConfig | None = None) -> tuple[Model, TrainConfig, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint's config snapshot and load its tensors.

    With ``expect`` given, architecture differences are reported as a diff.
    """
    tensors, text = ckpt.load(path)
    cfg = parse_config(text, f"{path} (config snapshot)")
    if expect is not None:
        diff = config_diff(expect.architecture(), cfg.architecture())
        if diff:
            raise ckpt.CheckpointError(f"{path}: incompatible checkpoint, config differs:\n" + "\n".join(diff))
    model = build_model(cfg)
    load_into(model, tensors, str(path))
    return model, cfg, tensors


def load_into(model: Model, tensors: dict[str, np.ndarray], source: str = "checkpoint"):
    names = {k for k in tensors if not k.startswith(ACC_PREFIX) and k != STEP_KEY}
    missing = sorted(set(model.named) - names)
    extra = sorted(names - set(model.named))
    if missing or extra:
        raise ckpt.CheckpointError(f"{source}: architecture mismatch; missing {missing[:5]}, unexpected {extra[:5]}")
    for k, t in model.named.items():
        if tensors[k].shape != t.shape:
            raise ckpt.CheckpointError(f"{source}: tensor {k!r} has shape {tensors[k].shape}, model expects {t.shape}")
    for k, t in model.named.items():
        t.data = tensors[k].copy()


# -- training ------------------------------------------------------------------------------

@dataclass
class TrainResult:
    log_lines: list[str] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    valid_cer: list[float] = field(default_factory=list)
    best_cer: float = float("inf")
    best_epoch: int = 0
    checkpoint: Path | None = None
    model: Model | None = None


class DatasetMismatch(ValueError):
    pass


def _dataset(path: str, what: str) -> Dataset:
    if not path:
        raise ConfigError(f"{what} path is not set")
    return load_dataset(path)


def train(cfg: TrainConfig, train_set: Dataset | None = None, valid_set: Dataset | None = None,
          out: TextIO | None = None) -> TrainResult:
    """Mini-batch CTC training with per-epoch validation and early stopping."""
    train_set = train_set or _dataset(cfg.train_data, "train_data")
    valid_set = valid_set or (_dataset(cfg.valid_data, "valid_data") if cfg.valid_data else train_set)
    for name, ds in (("train", train_set), ("valid", valid_set)):
        if len(ds.vocab) != cfg.vocab_size:
            raise DatasetMismatch(f"{name} vocabulary has {len(ds.vocab)} entries, config says {cfg.vocab_size}")
        bad = [c for s in ds.samples for c in s.label if not 1 <= c <= cfg.vocab_size]
        if bad:
            raise DatasetMismatch(f"{name} labels outside 1..{cfg.vocab_size}: {sorted(set(bad))[:5]}")

    model = build_model(cfg)
    opt = RMSProp(model.named, cfg.lr, cfg.rmsprop_decay, cfg.rmsprop_eps, cfg.clip_norm)
    rng = np.random.default_rng([cfg.seed, 2])
    samples = [s for s in train_set.samples if feasible(model, s)]
    skipped = len(train_set.samples) - len(samples)
    widths = [s.image.shape[1] for s in samples]
    params = model.parameters()
    result = TrainResult(model=model)
    logfile = open(cfg.log, "w", encoding="utf-8") if cfg.log else None
    stale = 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            total, count = 0.0, 0
            for batch in bucket_batches(widths, cfg.batch_size, rng):
                images = pad_batch([samples[i].image for i in batch])
                labels = [samples[i].label for i in batch]
                frames = [model.cnn.out_width(widths[i]) for i in batch]
                with Tape() as tape:
                    loss = ctc_loss_batch(model.logits(images, widths=[widths[i] for i in batch]), labels,
                                          frames=frames)
                backward(loss, tape, params)
                opt.step()
                total += float(loss.data) * len(batch)
                count += len(batch)
            epoch_loss = total / max(count, 1)
            rep, _ = evaluate_model(model, valid_set.samples, cfg.batch_size)
            line = f"epoch {epoch} loss {epoch_loss:.6f} valid_cer {rep.cer:.6f} skipped {skipped}"
            result.log_lines.append(line)
            result.losses.append(epoch_loss)
            result.valid_cer.append(rep.cer)
            for stream in (out, logfile):
                if stream is not None:
                    stream.write(line + "\n")
                    stream.flush()
            log.info(line)
            if rep.cer < result.best_cer:
                result.best_cer, result.best_epoch, stale = rep.cer, epoch, 0
                if cfg.checkpoint:
                    result.checkpoint = save_checkpoint(cfg.checkpoint, model, cfg, opt)
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
            if rep.cer == 0.0 and epoch_loss < cfg.stop_loss:
                break
    finally:
        if logfile is not None:
            logfile.close()
    return result


def evaluate(checkpoint_path, dataset_dir, out: TextIO = sys.stdout, worst: int = 10,
             batch_size: int = 8) -> MetricReport:
    model, cfg, _ = restore(checkpoint_path)
    ds = load_dataset(dataset_dir)
    if len(ds.vocab) != cfg.vocab_size:
        raise DatasetMismatch(f"dataset vocabulary has {len(ds.vocab)} entries, checkpoint expects {cfg.vocab_size}")
    rep, hyps = evaluate_model(model, ds.samples, batch_size)
    out.write(rep.line() + "\n")
    scored = []
    for s, h in zip(ds.samples, hyps):
        e = sum(edit_ops(s.label, h))
        scored.append((-e / max(len(s.label), 1), s.id, s.label, h))
    scored.sort(key=lambda r: (r[0], r[1]))
    out.write(f"worst {min(worst, len(scored))} lines:\n")
    for neg, sid, ref, hyp in scored[:worst]:
        out.write(f"  {sid:06d} cer {-neg:.3f} ref {' '.join(map(str, ref))} | hyp {' '.join(map(str, hyp))}\n")
    return rep
