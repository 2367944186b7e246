import numpy as np
import pytest

from sdslab.cli import main
from sdslab.config import RunConfig, dump_config, load_config, parse_config
from sdslab.errors import ConfigError, CorruptCheckpointError
from sdslab.fileio import load_checkpoint, read_pgm, save_checkpoint, write_pgm
from sdslab.teacher import init_model

FAST_THEORY = """
[experiment]
theory_samples = 4000
theory_steps = 300
theory_hidden = 32 32
theory_trials = 100
"""


# --- exit codes -------------------------------------------------------------


def test_no_args_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_command_and_flag(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["render", "--bogus"]) == 1
    assert main(["render", "--seed", "-3"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "missing.cfg"
    assert main(["distill", "--config", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_missing_teacher_checkpoint(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"[run]\nview_teacher = {tmp_path / 'absent.dtck'}\n")
    assert main(["distill", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "absent.dtck" in capsys.readouterr().err


def test_render_writes_images_and_echo(tmp_path):
    out = tmp_path / "r"
    assert main(["render", "--seed", "3", "--out", str(out)]) == 0
    img = read_pgm(out / "ground_truth.pgm")
    assert img.shape == (128, 128) and img.max() > 0.5
    assert read_pgm(out / "sinogram.pgm").shape == (64, 32)  # detector bins at teacher resolution
    echo = load_config(out / "config_echo.cfg")
    assert echo.run.seed == 3
    assert dump_config(echo) == (out / "config_echo.cfg").read_text()


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SDSLAB_OUT", str(tmp_path / "root"))
    assert main(["render"]) == 0
    assert (tmp_path / "root" / "render" / "ground_truth.pgm").exists()


def test_theory_check_twice_byte_identical(tmp_path):
    cfg = tmp_path / "fast.cfg"
    cfg.write_text(FAST_THEORY)
    for d in ("d1", "d2"):
        assert main(["theory-check", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / d)]) == 0
    names = sorted(p.name for p in (tmp_path / "d1").iterdir())
    assert "theory_curve.csv" in names
    for name in names:
        assert (tmp_path / "d1" / name).read_bytes() == (tmp_path / "d2" / name).read_bytes()


# --- PGM ---------------------------------------------------------------------


def test_pgm_zero_grid(tmp_path):
    write_pgm(np.zeros((3, 5)), tmp_path / "z.pgm")
    raw = (tmp_path / "z.pgm").read_bytes()
    assert raw == b"P5\n5 3\n255\n" + bytes(15)


def test_pgm_one_maps_to_255_and_clamps(tmp_path):
    write_pgm(np.array([[1.0, 2.0, -1.0]]), tmp_path / "o.pgm")
    assert (tmp_path / "o.pgm").read_bytes()[-3:] == bytes([255, 255, 0])


def test_pgm_round_trip(tmp_path):
    g = np.random.default_rng(0).random((17, 23))
    write_pgm(g, tmp_path / "g.pgm")
    assert np.max(np.abs(read_pgm(tmp_path / "g.pgm") - g)) <= 1 / 510


def test_pgm_malformed(tmp_path):
    (tmp_path / "bad.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "bad.pgm")


# --- checkpoints -------------------------------------------------------------


@pytest.fixture
def model():
    return init_model(16, "class", 3, hidden=(8, 8), rng=np.random.default_rng(1))


def test_checkpoint_round_trip(tmp_path, model):
    save_checkpoint(model, tmp_path / "m.dtck")
    back = load_checkpoint(tmp_path / "m.dtck")
    assert np.array_equal(back.params, model.params)
    assert back.widths == model.widths and back.cond_kind == "class" and back.n_classes == 3
    raw = (tmp_path / "m.dtck").read_bytes()
    assert raw[:4] == b"DTCK" and raw[4:8] == (1).to_bytes(4, "little")


def test_checkpoint_truncated(tmp_path, model):
    p = tmp_path / "m.dtck"
    save_checkpoint(model, p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(p)


def test_checkpoint_foreign_magic(tmp_path, model):
    p = tmp_path / "m.dtck"
    save_checkpoint(model, p)
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(CorruptCheckpointError, match="XXXX"):
        load_checkpoint(p)


def test_checkpoint_version_mismatch(tmp_path, model):
    p = tmp_path / "m.dtck"
    save_checkpoint(model, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CorruptCheckpointError, match="version"):
        load_checkpoint(p)


# --- config files ------------------------------------------------------------


def test_config_rejects_unknown_keys_and_sections():
    with pytest.raises(ConfigError, match="run.bogus"):
        parse_config("[run]\nbogus = 1\n")
    with pytest.raises(ConfigError, match="nowhere"):
        parse_config("[nowhere]\nseed = 1\n")
    with pytest.raises(ConfigError):
        parse_config("[run]\nseed = many\n")
    with pytest.raises(ConfigError):
        parse_config("[run]\nref_prob = 1.5\n")


def test_config_comments_and_overrides():
    cfg = parse_config("# header\n[run]\nseed = 9  # inline\n[sds]\ncfg_scale_fine = 3\n")
    assert cfg.run.seed == 9 and cfg.sds.cfg_scale_fine == 3.0
    assert cfg.sds.cfg_scale_coarse == RunConfig().sds.cfg_scale_coarse


def test_config_echo_round_trip_contains_every_default():
    text = dump_config(RunConfig())
    assert parse_config(text) == RunConfig()
    for section in ("run", "curriculum", "sds", "objective", "diffusion", "teacher", "experiment"):
        assert f"[{section}]" in text
    assert "ref_prob = 0.25" in text and "cfg_scale_fine = 25" in text
