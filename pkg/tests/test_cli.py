import filecmp

import pytest

from cmam.cli import main


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["fly"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and err.count("error:") == 1


def test_unknown_flag_is_usage_error(capsys):
    assert main(["gen", "--seed", "1", "--lines", "2", "--out", "x", "--colour", "red"]) == 1
    assert "unrecognized arguments" in capsys.readouterr().err


def test_missing_config_names_path(tmp_path, capsys):
    path = tmp_path / "missing.cfg"
    assert main(["train", "--config", str(path)]) == 1
    assert str(path) in capsys.readouterr().err


def test_bad_config_is_runtime_failure(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("colour = red\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg")]) == 2
    assert "unknown key 'colour'" in capsys.readouterr().err


def test_gen_twice_gives_identical_trees(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--seed", "7", "--vocab-size", "20", "--lines", "5", "--out", str(tmp_path / name)]) == 0
    top = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not top.diff_files and not top.left_only and not top.right_only
    images = sorted(p.name for p in (tmp_path / "a" / "images").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / "images", tmp_path / "b" / "images", images,
                                               shallow=False)
    assert len(match) == 5 and not mismatch and not errors


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--seed", "3", "--lines", "4", "--out", str(root / "data"),
                 "--min-length", "2", "--max-length", "4"]) == 0
    (root / "run.cfg").write_text("profile = tiny\nmax_epochs = 1\ntrain_data = data\ncheckpoint = model.ckpt\n")
    assert main(["train", "--config", str(root / "run.cfg")]) == 0
    return root


def test_train_eval_decode(trained, capsys):
    capsys.readouterr()
    assert main(["eval", "--model", str(trained / "model.ckpt"), "--data", str(trained / "data")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("CER ") and "worst 4 lines:" in out
    image = sorted((trained / "data" / "images").iterdir())[0]
    assert main(["decode", "--model", str(trained / "model.ckpt"), "--image", str(image)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("indices:") and "glyphs:" in out


def test_eval_missing_checkpoint_is_runtime_failure(trained, capsys):
    assert main(["eval", "--model", str(trained / "nope.ckpt"), "--data", str(trained / "data")]) == 2
    assert "nope.ckpt" in capsys.readouterr().err
