import io
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmam import checkpoint as ckpt
from cmam.config import ConfigError, TrainConfig, config_diff, load_config, parse_config
from cmam.optim import RMSProp, clip_global_norm, rmsprop_step
from cmam.synth import Dataset, emit_dataset, generate, glyph_alphabet
from cmam.tensor import Tensor
from cmam.train import (DatasetMismatch, bucket_batches, build_model, evaluate, model_tensors, pad_batch, restore,
                        save_checkpoint, train)


def tiny(**kw):
    return TrainConfig.for_profile("tiny", **kw)


def small_set(n=4, seed=11, length=(3, 5)):
    return Dataset(generate(seed, 20, n, length), [g.name for g in glyph_alphabet(20)])


# -- optimizer ------------------------------------------------------------------------

def test_rmsprop_zero_grad_decays_accumulator():
    p, acc = {"w": np.array([1.0, 2.0])}, {"w": np.array([4.0, 1.0])}
    rmsprop_step(p, {"w": np.zeros(2)}, acc, lr=0.1, decay=0.9)
    assert np.array_equal(p["w"], [1.0, 2.0])
    assert np.allclose(acc["w"], [3.6, 0.9])


def test_rmsprop_first_step_hand_value():
    c, lr, decay, eps = 50.0, 1e-3, 0.9, 1e-8
    p, acc = {"w": np.zeros(3)}, {"w": np.zeros(3)}
    rmsprop_step(p, {"w": np.full(3, c)}, acc, lr, decay, eps)
    assert np.allclose(acc["w"], (1 - decay) * c * c, rtol=0, atol=1e-12)
    expected = -lr * c / math.sqrt((1 - decay) * c * c + eps)
    assert np.allclose(p["w"], expected, rtol=0, atol=1e-15)
    assert expected == pytest.approx(-lr / math.sqrt(1 - decay), rel=1e-9)


def test_rmsprop_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        rmsprop_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.1)


def test_global_norm_clipping():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_global_norm(grads, 1.0)
    assert norm == 5.0
    assert np.allclose(np.sqrt(sum((g ** 2).sum() for g in clipped.values())), 1.0)
    same, _ = clip_global_norm(grads, 10.0)
    assert same is grads


def test_identical_optimizer_trajectories():
    def run():
        rng = np.random.default_rng(0)
        named = {"w": Tensor(rng.normal(size=(3, 2)), requires_grad=True)}
        opt = RMSProp(named, lr=0.01)
        for _ in range(5):
            named["w"].grad = rng.normal(size=(3, 2)) * 20
            opt.step()
        return named["w"].data.tobytes()

    assert run() == run()


# -- config -----------------------------------------------------------------------------

def test_config_text_roundtrip():
    cfg = tiny(model="crnn", lr=3e-3, cnn_channels=(4, 5, 6, 7), train_data="x")
    assert parse_config(cfg.to_text()) == cfg


def test_config_comments_and_profile():
    cfg = parse_config("# a comment\nprofile = tiny  # inline\nlr = 0.01\n")
    assert cfg.hidden == 32 and cfg.lr == 0.01


@pytest.mark.parametrize("text, match", [("colour = red", "unknown key"), ("lr 0.1", "key = value"),
                                         ("batch_size = many", "cannot parse"), ("model = rnn", "model kind"),
                                         ("hidden = 0", "positive"), ("refinements = -1", ">= 0"),
                                         ("profile = huge", "profile")])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_config_paths_relative_to_file(tmp_path):
    (tmp_path / "run.cfg").write_text("profile = tiny\ntrain_data = data/train\ncheckpoint = /abs/model.ckpt\n")
    cfg = load_config(tmp_path / "run.cfg")
    assert cfg.train_data == str(tmp_path / "data" / "train")
    assert cfg.checkpoint == "/abs/model.ckpt"


def test_config_diff_lists_changed_keys():
    diff = config_diff(tiny().architecture(), tiny(hidden=16).architecture())
    assert diff == ["  hidden: 32 != 16"]


# -- checkpoint format -------------------------------------------------------------------

def test_checkpoint_layout_is_bit_exact():
    data = ckpt.encode({"w": np.array([[1.0, 2.0]])}, "k = v\n")
    expected = (b"CMAM" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"w" + struct.pack("<B", 2)
                + struct.pack("<2I", 1, 2) + np.array([1.0, 2.0], "<f8").tobytes()
                + struct.pack("<I", 6) + b"k = v\n")
    assert data == expected


def test_checkpoint_roundtrip_and_byte_identity(tmp_path):
    model = build_model(tiny())
    tensors = model_tensors(model)
    back = ckpt.checkpoint_roundtrip(tensors, tmp_path / "a.ckpt", tiny().to_text())
    assert all(np.array_equal(back[k], v) and back[k].dtype == np.float64 for k, v in tensors.items())
    ckpt.save(tmp_path / "b.ckpt", back, ckpt.load(tmp_path / "a.ckpt")[1])
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@settings(max_examples=25, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8), st.lists(st.integers(1, 3), max_size=3), max_size=4),
       st.text(max_size=20))
def test_encode_decode_property(shapes, text):
    rng = np.random.default_rng(0)
    tensors = {k: rng.normal(size=tuple(v)) for k, v in shapes.items()}
    back, cfg = ckpt.decode(ckpt.encode(tensors, text))
    assert cfg == text and list(back) == list(tensors)
    assert all(np.array_equal(back[k], tensors[k]) for k in tensors)


def test_truncation_names_tensor():
    data = ckpt.encode({"alpha": np.zeros(4), "beta": np.ones((2, 3))}, "")
    cut = data[:len(data) - 4 - 10]
    with pytest.raises(ckpt.CheckpointError, match="'beta' data"):
        ckpt.decode(cut)


def test_bad_magic_and_version():
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.decode(b"NOPE" + bytes(8))
    with pytest.raises(ckpt.CheckpointError, match="version 2"):
        ckpt.decode(b"CMAM" + struct.pack("<II", 2, 0))


def test_trailing_bytes_rejected():
    with pytest.raises(ckpt.CheckpointError, match="trailing"):
        ckpt.decode(ckpt.encode({}, "") + b"x")


def test_every_parameter_saved_once(tmp_path):
    cfg = tiny()
    model = build_model(cfg)
    opt = RMSProp(model.named)
    path = save_checkpoint(tmp_path / "m.ckpt", model, cfg, opt)
    tensors, _ = ckpt.load(path)
    names = [k for k in tensors if not k.startswith("rmsprop.") and k != "train.step"]
    assert sorted(names) == sorted(model.named)
    assert sorted(k[len("rmsprop."):] for k in tensors if k.startswith("rmsprop.")) == sorted(model.named)


def test_restore_rejects_mismatched_architecture(tmp_path):
    cfg = tiny()
    save_checkpoint(tmp_path / "m.ckpt", build_model(cfg), cfg)
    with pytest.raises(ckpt.CheckpointError, match="hidden: 16 != 32"):
        restore(tmp_path / "m.ckpt", expect=cfg.with_(hidden=16))
    tensors, text = ckpt.load(tmp_path / "m.ckpt")
    tensors["cmam.w_out"] = tensors["cmam.w_out"][:, :-1]
    ckpt.save(tmp_path / "bad.ckpt", tensors, text)
    with pytest.raises(ckpt.CheckpointError, match="cmam.w_out"):
        restore(tmp_path / "bad.ckpt")


# -- batching and training -------------------------------------------------------------

def test_bucketing_covers_every_index_once():
    widths = list(np.random.default_rng(0).integers(50, 400, size=23))
    batches = bucket_batches(widths, 4, np.random.default_rng(1))
    flat = sorted(i for b in batches for i in b)
    assert flat == list(range(23)) and max(len(b) for b in batches) == 4
    for b in bucket_batches(widths, 4):
        ws = [widths[i] for i in b]
        assert ws == sorted(ws)


def test_pad_batch_right_pads_with_background():
    out = pad_batch([np.ones((32, 3)), np.ones((32, 5))]).data
    assert out.shape == (2, 1, 32, 5)
    assert not out[0, 0, :, 3:].any() and out[1].all()


def test_patience_with_frozen_weights():
    ds = small_set()
    r = train(tiny(lr=0.0, patience=3, max_epochs=20), ds, ds)
    assert len(r.log_lines) == 4  # first epoch sets the best, then three without improvement
    assert r.best_epoch == 1


def test_seed_determinism_of_epoch_loss():
    ds = small_set()
    a = train(tiny(lr=1e-3, max_epochs=1), ds, ds)
    b = train(tiny(lr=1e-3, max_epochs=1), ds, ds)
    assert a.log_lines == b.log_lines
    c = train(tiny(lr=1e-3, max_epochs=1, seed=5), ds, ds)
    assert c.losses != a.losses


def test_log_line_format(tmp_path):
    ds = small_set(3)
    out = io.StringIO()
    train(tiny(max_epochs=2, log=str(tmp_path / "train.log")), ds, ds, out)
    lines = (tmp_path / "train.log").read_text().splitlines()
    assert lines == out.getvalue().splitlines()
    for n, line in enumerate(lines, 1):
        f = line.split()
        assert f[0] == "epoch" and f[1] == str(n) and f[2] == "loss" and f[4] == "valid_cer" and f[6] == "skipped"
        float(f[3]), float(f[5]), int(f[7])


def test_infeasible_samples_are_skipped_and_counted():
    ds = small_set(3)
    ds.samples[0].image = ds.samples[0].image[:, :8]  # two frames cannot carry three or more labels
    r = train(tiny(max_epochs=1), ds, ds)
    assert r.log_lines[0].endswith("skipped 1")


def test_vocab_mismatch_aborts():
    ds = small_set()
    with pytest.raises(DatasetMismatch, match="vocabulary"):
        train(tiny(vocab_size=25, max_epochs=1), ds, ds)


def test_evaluate_is_deterministic(tmp_path):
    ds = small_set()
    emit_dataset(ds.samples, tmp_path / "data", ds.vocab)
    train(tiny(max_epochs=1, checkpoint=str(tmp_path / "m.ckpt")), ds, ds)
    outs = []
    for _ in range(2):
        buf = io.StringIO()
        evaluate(tmp_path / "m.ckpt", tmp_path / "data", buf)
        outs.append(buf.getvalue())
    assert outs[0] == outs[1]
    assert outs[0].startswith("CER ") and "worst 4 lines:" in outs[0]
