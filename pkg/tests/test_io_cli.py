import csv
import struct
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from liploss import cli, io
from liploss import metrics as mt
from liploss import phantom as ph
from liploss.errors import ConfigError, FormatError
from liploss.projector import make_angle_set, sinogram

SMOKE = ["--set", "epochs=1", "--set", "patches_per_epoch=8", "--set", "patch_extent=16",
         "--set", "batch_size=4", "--set", "levels=2", "--set", "base_channels=4"]


# container ------------------------------------------------------------

def test_container_layout_bytes():
    blob = io.encode_tensors({"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
    expected = (b"LIPT" + bytes([1]) + struct.pack("<I", 1) + struct.pack("<I", 2) + b"ab"
                + bytes([1, 2]) + struct.pack("<II", 1, 2) + np.array([1, 2], "<f4").tobytes())
    assert blob == expected


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       hnp.arrays(st.sampled_from([np.float64, np.float32]),
                                  hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)),
                       max_size=4))
def test_container_roundtrip_bit_exact(entries):
    out = io.decode_tensors(io.encode_tensors(entries))
    assert list(out) == list(entries)
    for k, v in entries.items():
        assert out[k].dtype == v.dtype and out[k].shape == v.shape
        assert out[k].tobytes() == np.ascontiguousarray(v).tobytes()
    assert io.encode_tensors(out) == io.encode_tensors(entries)


def test_container_rejects_bad_input():
    good = io.encode_tensors({"x": np.zeros(3)})
    with pytest.raises(FormatError, match="magic"):
        io.decode_tensors(b"NOPE" + good[4:])
    with pytest.raises(FormatError, match="version"):
        io.decode_tensors(good[:4] + bytes([2]) + good[5:])
    with pytest.raises(FormatError):
        io.decode_tensors(good[:-3])
    with pytest.raises(FormatError):
        io.decode_tensors(good + b"\0")


def test_config_parsing_reports_line():
    with pytest.raises(ConfigError, match=":3:"):
        path_text = "epochs = 2\n# comment\nbogus_key = 1\n"
        items = io.parse_config_text(path_text, "cfg")
        io.apply_config(items, {"t": object}, {"t": {"epochs": int}}, "cfg")
    with pytest.raises(ConfigError, match=":1:"):
        io.parse_config_text("no equals sign here", "cfg")


def test_run_config_file(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("epochs = 3   # short\nlambda2 = 0.1\nbase_channels = 8\nsigma = 4\n")
    net, train, norm = cli.load_run_config(str(f), ["arm = im"])
    assert (train.epochs, train.lambda2, train.arm, net.base_channels, norm.sigma) == (3, 0.1, "im", 8, 4.0)
    f.write_text("epochs = three\n")
    with pytest.raises(ConfigError, match=":1:"):
        cli.load_run_config(str(f))


def test_pgm_roundtrip(tmp_path):
    img = np.arange(12.0).reshape(3, 4)
    io.write_pgm(tmp_path / "a.pgm", img)
    back = io.read_pgm(tmp_path / "a.pgm")
    assert back.shape == (3, 4) and back.min() == 0 and back.max() == 255


# commands ---------------------------------------------------------------

def run(*argv):
    return cli.main([str(a) for a in argv])


def test_gen_data_minimal_and_deterministic(tmp_path):
    assert run("gen-data", "--n", 1, "--out", tmp_path / "a", "--seed", 3) == 0
    recs = io.read_manifest(tmp_path / "a" / io.MANIFEST_NAME)
    assert len(recs) == 1
    assert run("gen-data", "--n", 1, "--out", tmp_path / "b", "--seed", 3) == 0
    for name in ("manifest.txt", recs[0].path):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_data_250_invariant_sweep(tmp_path):
    assert run("gen-data", "--n", 250, "--out", tmp_path, "--seed", 9) == 0
    recs, pairs = cli.load_dataset(tmp_path)
    assert len(pairs) == 250
    for p in pairs:
        assert p.mu_truth.shape == (64, 64)
        assert p.mu_truth.min() >= 0 and p.mu_truth.max() <= ph.MU_MAX
        assert p.mu_input.min() >= 0 and p.lambda_input.min() >= 0
    for r in recs[:3]:
        blob = (tmp_path / r.path).read_bytes()
        assert io.encode_tensors(io.decode_tensors(blob)) == blob


def test_gen_data_spec_ranges(tmp_path):
    f = tmp_path / "ranges.txt"
    f.write_text("mu_noise_std = 0.0\nshape = 32, 32\n")
    assert run("gen-data", "--n", 2, "--out", tmp_path / "d", "--spec-ranges", f) == 0
    _, pairs = cli.load_dataset(tmp_path / "d")
    assert pairs[0].mu_truth.shape == (32, 32)
    f.write_text("not_a_field = 1\n")
    assert run("gen-data", "--n", 2, "--out", tmp_path / "e", "--spec-ranges", f) == 1


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--n", 3, "--out", d, "--seed", 1) == 0
    return d


def test_train_and_arm_equivalence(dataset, tmp_path):
    assert run("train", "--data", dataset, "--arm", "im", *SMOKE, "--set", "lambda2=0", "--out", tmp_path / "im") == 0
    assert run("train", "--data", dataset, "--arm", "lip", *SMOKE, "--set", "lambda2=0", "--out", tmp_path / "lip") == 0
    a = (tmp_path / "im" / "loss.csv").read_text()
    assert a == (tmp_path / "lip" / "loss.csv").read_text()
    assert len(a.splitlines()) == 3
    assert (tmp_path / "im" / "checkpoint.lipt").exists()


def test_train_config_errors_exit_1(dataset, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = 1\nunknown = 2\n")
    assert run("train", "--data", dataset, "--config", cfg, "--out", tmp_path / "x") == 1
    assert "bad.cfg:2" in capsys.readouterr().err
    assert run("train", "--data", tmp_path / "missing", "--out", tmp_path / "y") == 2


def test_eval_truth_bypass_and_schema(dataset, tmp_path):
    assert run("eval", "--data", dataset, "--pred-source", "truth", "--out", tmp_path) == 0
    rows = list(csv.reader((tmp_path / "metrics.csv").read_text().splitlines()))
    assert rows[0] == ["id"] + list(mt.METRIC_NAMES)
    for r in rows[1:-1]:
        assert r[1:] == ["0", "0", "inf", "1", "0", "0"]
    assert rows[-1] == ["std"] + ["0"] * 6


def test_eval_matches_library(dataset, tmp_path):
    assert run("eval", "--data", dataset, "--pred-source", "mu-input", "--angles", 6, "--out", tmp_path) == 0
    rows = list(csv.reader((tmp_path / "metrics.csv").read_text().splitlines()))[1:4]
    _, pairs = cli.load_dataset(dataset)
    for r, p in zip(rows, pairs):
        lib = mt.all_metrics(p.mu_input, p.mu_truth, make_angle_set(6), p.voxel_width)
        for name, v in zip(mt.METRIC_NAMES, r[1:]):
            assert abs(float(v) - lib[name]) <= 1e-12 * max(1, abs(lib[name]))


def test_eval_checkpoint_with_pgm(dataset, tmp_path):
    assert run("train", "--data", dataset, *SMOKE, "--out", tmp_path / "t") == 0
    assert run("eval", "--checkpoint", tmp_path / "t" / "checkpoint.lipt", "--data", dataset,
               "--out", tmp_path / "e", "--pgm", "--patch", 32, "--stride", 16) == 0
    assert sorted(p.name for p in (tmp_path / "e").glob("00000_*.pgm")) == [
        "00000_mu_diff.pgm", "00000_mu_pred.pgm", "00000_mu_truth.pgm"]
    assert run("eval", "--data", dataset, "--out", tmp_path / "f") == 1
    assert run("eval", "--checkpoint", tmp_path / "nothing.lipt", "--data", dataset, "--out", tmp_path / "g") == 2


def test_project_command(tmp_path):
    disk = np.zeros((32, 32))
    i, j = np.mgrid[:32, :32]
    disk[(i - 15.5) ** 2 + (j - 15.5) ** 2 < 100] = 0.096
    io.write_tensors(tmp_path / "disk.lipt", {"mu_truth": disk, "voxel_width": np.asarray(0.4)})
    assert run("project", "--image", tmp_path / "disk.lipt", "--angles", 4, "--out", tmp_path / "p") == 0
    angles, values = cli.read_sinogram_csv((tmp_path / "p" / "sinogram.csv").read_text())
    assert angles == [0.0, 45.0, 90.0, 135.0]
    ref = sinogram(disk, make_angle_set(4), 0.4)
    assert np.array_equal(values, ref)
    assert io.read_pgm(tmp_path / "p" / "sinogram.pgm").shape == (4, 32)

    io.write_tensors(tmp_path / "zero.lipt", {"img": np.zeros((8, 8))})
    assert run("project", "--image", tmp_path / "zero.lipt", "--out", tmp_path / "z") == 0
    _, zv = cli.read_sinogram_csv((tmp_path / "z" / "sinogram.csv").read_text())
    assert not np.any(zv)


def test_project_non_square_error(tmp_path, capsys):
    io.write_tensors(tmp_path / "r.lipt", {"img": np.zeros((8, 6))})
    assert run("project", "--image", tmp_path / "r.lipt", "--out", tmp_path / "o") == 2
    assert "square" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--seed", 3) == 0
    out = capsys.readouterr().out
    errs = [float(line.rsplit("=", 1)[1]) for line in out.splitlines() if "max_rel_error=" in line]
    assert errs and max(errs) <= 1e-5
    assert run("gradcheck", "--corrupt") == 2


def test_usage_errors_exit_1():
    assert subprocess.run([sys.executable, "-m", "liploss.cli", "frobnicate"], capture_output=True).returncode == 1
    assert subprocess.run([sys.executable, "-m", "liploss.cli", "gen-data"], capture_output=True).returncode == 1
