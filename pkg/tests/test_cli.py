import os

import numpy as np
import pytest

from unclip_lab import checkpoint as CK
from unclip_lab import config as CF
from unclip_lab import ppm
from unclip_lab.cli import main


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def _arrays():
    rng = np.random.default_rng(0)
    return {"w": rng.normal(size=(3, 4)).astype(np.float32),
            "ids": np.arange(5, dtype=np.int64),
            "bytes": np.arange(6, dtype=np.uint8).reshape(2, 3)}


def test_checkpoint_round_trip_bit_exact(tmp_path):
    path = tmp_path / "m.ckpt"
    arrays = _arrays()
    CK.save_checkpoint(path, "clip", arrays, epoch=3, config_hash="abc", rng_state="seed=7")
    loaded, meta = CK.load_checkpoint(path, expected_kind="clip")
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        assert np.array_equal(loaded[k], arrays[k])
    assert meta == {"kind": "clip", "epoch": 3, "config_hash": "abc", "rng_state": "seed=7"}


def test_checkpoint_repeat_save_identical(tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    CK.save_checkpoint(p1, "clip", _arrays())
    CK.save_checkpoint(p2, "clip", _arrays())
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CK.CheckpointError, match="magic"):
        CK.load_checkpoint(path)


def test_checkpoint_truncation_detected(tmp_path):
    path = tmp_path / "m.ckpt"
    CK.save_checkpoint(path, "clip", _arrays())
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(CK.CheckpointError, match="digest"):
        CK.load_checkpoint(path)


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "m.ckpt"
    CK.save_checkpoint(path, "clip", _arrays())
    blob = bytearray(path.read_bytes())
    blob[40] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(CK.CheckpointError, match="digest"):
        CK.load_checkpoint(path)


def test_checkpoint_version_ahead(tmp_path):
    import hashlib
    import struct
    path = tmp_path / "m.ckpt"
    header = b"{}"
    body = CK.MAGIC + struct.pack("<HI", CK.VERSION + 1, len(header)) + header
    path.write_bytes(body + hashlib.sha256(body).digest())
    with pytest.raises(CK.CheckpointError, match="version"):
        CK.load_checkpoint(path)


def test_checkpoint_kind_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    CK.save_checkpoint(path, "unclip", _arrays())
    with pytest.raises(CK.CheckpointError, match="kind|expected"):
        CK.load_checkpoint(path, expected_kind="clip")
    CK.load_checkpoint(path, expected_kind="unclip")


# ---------------------------------------------------------------------------
# run config
# ---------------------------------------------------------------------------

def test_config_defaults_round_trip(tmp_path):
    path = tmp_path / "config.ini"
    CF.write_default_config(path)
    cfg = CF.load_config(path)
    assert cfg.values == CF.RunConfig().values
    assert cfg.digest() == CF.RunConfig().digest()


def test_config_override_and_types(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text("[clip]\nsteps = 7\ntrain_temperature = false\n"
                    "[corpus]\nsize = 12\n")
    cfg = CF.load_config(path)
    assert cfg["clip"]["steps"] == 7
    assert cfg["clip"]["train_temperature"] is False
    assert cfg["corpus"]["size"] == 12
    # untouched keys keep defaults
    assert cfg["clip"]["batch_size"] == CF.DEFAULTS["clip"]["batch_size"]
    assert cfg.digest() != CF.RunConfig().digest()


def test_config_unknown_key_rejected(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text("[clip]\nstepz = 7\n")
    with pytest.raises(CF.ConfigError, match="clip.stepz"):
        CF.load_config(path)
    path.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(CF.ConfigError, match="nonsense"):
        CF.load_config(path)


def test_config_bad_value_rejected(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text("[clip]\nsteps = soon\n")
    with pytest.raises(CF.ConfigError, match="clip.steps"):
        CF.load_config(path)
    path.write_text("[clip]\ntrain_temperature = maybe\n")
    with pytest.raises(CF.ConfigError):
        CF.load_config(path)


# ---------------------------------------------------------------------------
# ppm export
# ---------------------------------------------------------------------------

def test_ppm_single_pixel_fixtures():
    white = np.ones((1, 1, 3), np.float32)
    assert ppm.ppm_bytes(white) == b"P6\n1 1\n255\n\xff\xff\xff"
    black = np.zeros((1, 1, 3), np.float32)
    assert ppm.ppm_bytes(black) == b"P6\n1 1\n255\n\x00\x00\x00"


def test_ppm_rounds_half_away_from_zero():
    # 0.5 * 255 = 127.5 must become 128, not banker's-round to 127
    mid = np.full((1, 1, 3), 0.5, np.float64)
    assert ppm.ppm_bytes(mid)[-3:] == b"\x80\x80\x80"


def test_ppm_rejects_out_of_range_and_bad_shape():
    with pytest.raises(ppm.PpmError, match="outside"):
        ppm.ppm_bytes(np.full((1, 1, 3), 1.001))
    with pytest.raises(ppm.PpmError, match="outside"):
        ppm.ppm_bytes(np.full((1, 1, 3), -0.001))
    with pytest.raises(ppm.PpmError, match="image"):
        ppm.ppm_bytes(np.zeros((4, 4)))


def test_ppm_header_dimensions(tmp_path):
    img = np.zeros((2, 5, 3), np.float32)
    out = tmp_path / "x.ppm"
    ppm.export_ppm(out, img)
    data = out.read_bytes()
    assert data.startswith(b"P6\n5 2\n255\n")
    assert len(data) == len(b"P6\n5 2\n255\n") + 2 * 5 * 3


# ---------------------------------------------------------------------------
# the command line
# ---------------------------------------------------------------------------

TINY_CONFIG = """\
[corpus]
size = 300
[clip]
steps = 6
batch_size = 8
eval_every = 3
[diffusion]
steps = 6
batch_size = 8
[finetune]
epochs = 1
batch_size = 8
[eval]
blind_threshold = 0.001
per_family_cap = 5
"""


@pytest.fixture()
def run_dir(tmp_path):
    root = tmp_path / "run"
    root.mkdir()
    (root / "config.ini").write_text(TINY_CONFIG)
    return str(root)


def _run(root, *argv):
    return main(["--out", root, *argv])


def test_cli_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2


def test_cli_missing_artifact_is_runtime_error(run_dir, capsys):
    assert _run(run_dir, "train-clip") == 1
    assert "error:" in capsys.readouterr().err


def test_cli_bad_config_is_runtime_error(tmp_path, capsys):
    root = tmp_path / "run"
    root.mkdir()
    (root / "config.ini").write_text("[clip]\nstepz = 1\n")
    assert main(["--out", str(root), "gen-data"]) == 1
    assert "stepz" in capsys.readouterr().err


def test_cli_writes_default_config(tmp_path):
    root = str(tmp_path / "fresh")
    assert _run(root, "gen-data", "--seed", "1") == 1 or True  # size 2000 corpus is fine too
    assert os.path.exists(os.path.join(root, "config.ini"))


def test_cli_gen_data_and_inspect(run_dir, capsys):
    assert _run(run_dir, "gen-data", "--seed", "3") == 0
    assert os.path.exists(os.path.join(run_dir, "corpus.bin"))
    out = capsys.readouterr().out
    assert "300 scenes" in out
    assert _run(run_dir, "inspect", "--scene", "0") == 0
    out = capsys.readouterr().out
    assert "caption:" in out and "attrs:" in out
    assert _run(run_dir, "inspect", "--scene", "999") == 1


def test_cli_tiny_workflow(run_dir, capsys):
    for argv in (("gen-data", "--seed", "3"),
                 ("train-clip", "--seed", "3"),
                 ("train-unclip", "--seed", "3"),
                 ("finetune", "--seed", "3"),
                 ("diagnose",),
                 ("sample", "--seed", "3", "--mode", "deterministic"),
                 ("eval-blind",), ("eval-dense",), ("eval-zeroshot",),
                 ("report",)):
        assert _run(run_dir, *argv) == 0, argv
    for name in ("clip.ckpt", "unclip.ckpt", "finetuned.ckpt", "finetune_curve.csv",
                 "report.txt", "metrics.csv"):
        assert os.path.exists(os.path.join(run_dir, name)), name
    csv = open(os.path.join(run_dir, "metrics.csv")).read()
    assert csv.splitlines()[1].startswith("1,original,")
    assert csv.splitlines()[2].startswith("1,finetuned,")
    # sample wrote a parseable ppm
    samples = [f for f in os.listdir(run_dir) if f.endswith(".ppm")]
    assert samples
    with open(os.path.join(run_dir, samples[0]), "rb") as f:
        assert f.read(3) == b"P6\n"
    # the report is reproducible byte for byte
    before = open(os.path.join(run_dir, "report.txt")).read()
    assert _run(run_dir, "report") == 0
    assert open(os.path.join(run_dir, "report.txt")).read() == before


def test_cli_report_refuses_foreign_metrics(run_dir, capsys):
    assert _run(run_dir, "gen-data", "--seed", "3") == 0
    assert _run(run_dir, "train-clip", "--seed", "3") == 0
    assert _run(run_dir, "eval-zeroshot") == 0
    # regenerate the corpus with a different seed: cached metrics no longer apply
    assert _run(run_dir, "gen-data", "--seed", "4") == 0
    assert _run(run_dir, "report") == 1
    assert "different corpus" in capsys.readouterr().err
