"""End-to-end command behavior: flags, exit codes, manifests, file round trips."""

import csv
import json
import struct

import numpy as np
import pytest

from dnsmooth.cli import main
from dnsmooth.metrics import alp, nmse_detail
from dnsmooth.smoother import load_checkpoint, load_smoothing_results
from dnsmooth.systems import TrajectoryDataset


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """One generated dataset, one tiny checkpoint, one evaluation directory."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "train.dnsc"
    model = root / "model.dnsc"
    evaldir = root / "eval"
    assert run("generate", "--system", "lorenz", "--n", 3, "--t", 24,
               "--smnr", 10, "--seed", 1, "--out", data) == 0
    assert run("train", "--data", data, "--variant", "dns", "--epochs", 2,
               "--batch", 2, "--seed", 0, "--out", model) == 0
    assert run("evaluate", "--data", data, "--checkpoint", model,
               "--out", evaldir) == 0
    return {"root": root, "data": data, "model": model, "eval": evaldir}


def corrupt_block(path, name):
    """Overwrite one stored payload in place (all-ones bytes decode as nan)."""
    raw = bytearray(path.read_bytes())
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hlen].decode())
    entry = next(e for e in header["arrays"] if e["name"] == name)
    start = 12 + hlen + entry["offset"]
    raw[start:start + entry["nbytes"]] = b"\xff" * entry["nbytes"]
    path.write_bytes(bytes(raw))


class TestGenerate:
    def test_writes_requested_shape(self, work, tmp_path):
        out = tmp_path / "d.dnsc"
        assert run("generate", "--system", "lorenz", "--n", 2, "--t", 5,
                   "--smnr", 0, "--seed", 1, "--out", out) == 0
        ds = TrajectoryDataset.load(out)
        assert ds.n_sequences == 2 and ds.lengths == [5, 5]
        assert ds.states is not None

    def test_rerun_is_byte_identical_and_manifest_appends(self, tmp_path):
        out = tmp_path / "d.dnsc"
        args = ("generate", "--system", "lorenz", "--n", 2, "--t", 5,
                "--smnr", 0, "--seed", 1, "--out", out)
        assert run(*args) == 0
        first = out.read_bytes()
        assert run(*args) == 0
        assert out.read_bytes() == first
        entries = json.loads((tmp_path / "d.dnsc.manifest.json").read_text())
        assert len(entries) == 2
        assert entries[0]["command"] == "generate"
        assert entries[0]["resolved_config"]["system"] == "lorenz"

    def test_smnr_changes_noise_not_states(self, tmp_path):
        lo, hi = tmp_path / "lo.dnsc", tmp_path / "hi.dnsc"
        for smnr, out in ((-10, lo), (10, hi)):
            assert run("generate", "--system", "lorenz", "--n", 2, "--t", 40,
                       "--smnr", smnr, "--seed", 3, "--out", out) == 0
        a, b = TrajectoryDataset.load(lo), TrajectoryDataset.load(hi)
        for xa, xb in zip(a.states, b.states):
            np.testing.assert_array_equal(xa, xb)
        from dnsmooth.metrics import measure_smnr
        assert measure_smnr(a) == pytest.approx(-10.0, abs=1e-9)
        assert measure_smnr(b) == pytest.approx(10.0, abs=1e-9)

    def test_bad_system_is_usage_error(self, tmp_path):
        assert run("generate", "--system", "roessler", "--n", 1, "--t", 5,
                   "--smnr", 0, "--out", tmp_path / "d.dnsc") == 2

    def test_missing_required_setting(self, tmp_path):
        assert run("generate", "--system", "lorenz", "--n", 1, "--t", 5,
                   "--out", tmp_path / "d.dnsc") == 2

    def test_config_file_with_flag_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"system": "lorenz", "n": 1, "t": 5,
                                   "smnr": 0.0, "seed": 2}))
        out = tmp_path / "d.dnsc"
        assert run("generate", "--config", cfg, "--n", 3, "--out", out) == 0
        assert TrajectoryDataset.load(out).n_sequences == 3

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"system": "lorenz", "gain": 2}))
        assert run("generate", "--config", cfg, "--n", 1, "--t", 5,
                   "--smnr", 0, "--out", tmp_path / "d.dnsc") == 2


class TestTrain:
    def test_checkpoint_loads(self, work):
        params, header = load_checkpoint(work["model"])
        assert params.arch.variant == "dns"
        assert header["epoch_next"] == 2
        assert len(header["history"]) == 2

    def test_missing_dataset(self, tmp_path):
        assert run("train", "--data", tmp_path / "none.dnsc", "--epochs", 1,
                   "--out", tmp_path / "m.dnsc") == 2

    def test_resume_matches_uninterrupted(self, work, tmp_path):
        straight, half = tmp_path / "a.dnsc", tmp_path / "b.dnsc"
        base = ("--data", work["data"], "--variant", "dns", "--batch", 2, "--seed", 0)
        assert run("train", *base, "--epochs", 3, "--out", straight) == 0
        assert run("train", *base, "--epochs", 2, "--out", half) == 0
        assert run("train", *base, "--epochs", 3, "--resume", half,
                   "--out", half) == 0
        assert half.read_bytes() == straight.read_bytes()

    def test_states_block_is_never_read(self, work, tmp_path):
        clean_ckpt, dirty_ckpt = tmp_path / "c.dnsc", tmp_path / "d.dnsc"
        dirty_data = tmp_path / "corrupted.dnsc"
        dirty_data.write_bytes(work["data"].read_bytes())
        corrupt_block(dirty_data, "states")
        assert np.isnan(np.concatenate(
            TrajectoryDataset.load(dirty_data).states)).all()  # states really are garbage
        args = ("--variant", "dns", "--epochs", 1, "--batch", 2, "--seed", 0)
        assert run("train", "--data", work["data"], *args, "--out", clean_ckpt) == 0
        assert run("train", "--data", dirty_data, *args, "--out", dirty_ckpt) == 0
        assert clean_ckpt.read_bytes() == dirty_ckpt.read_bytes()

    def test_divergence_exits_3_and_keeps_last_finite_checkpoint(self, work, tmp_path,
                                                                 capsys):
        poisoned = tmp_path / "poisoned.dnsc"
        poisoned.write_bytes(work["data"].read_bytes())
        corrupt_block(poisoned, "measurements")
        out = tmp_path / "diverged.dnsc"
        with np.errstate(invalid="ignore", over="ignore"):
            assert run("train", "--data", poisoned, "--variant", "dns", "--epochs", 2,
                       "--batch", 2, "--seed", 0, "--out", out) == 3
        assert "training diverged; last finite parameters kept" in capsys.readouterr().err
        params, header = load_checkpoint(out)
        assert header["meta"] == {"diverged_epoch": 0, "diverged_batch": 0}
        assert all(np.isfinite(t).all() for t in params.tensors.values())

    def test_resume_honors_lr_decay_boundary(self, work, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"lr_decay_every": 2, "lr_decay": 0.5}))
        base = ("--data", work["data"], "--variant", "dns", "--batch", 2,
                "--seed", 0, "--config", cfg)
        straight, half = tmp_path / "a.dnsc", tmp_path / "b.dnsc"
        assert run("train", *base, "--epochs", 4, "--out", straight) == 0
        assert run("train", *base, "--epochs", 2, "--out", half) == 0
        assert run("train", *base, "--epochs", 4, "--resume", half, "--out", half) == 0
        assert half.read_bytes() == straight.read_bytes()
        _, header = load_checkpoint(half)
        # the epoch crossing the decay boundary happens inside the resumed run
        assert [row["lr"] for row in header["history"]] == [1e-3, 1e-3, 5e-4, 5e-4]


class TestEvaluate:
    def test_metrics_are_finite_and_complete(self, work):
        metrics = json.loads((work["eval"] / "metrics.json").read_text())
        assert metrics["method"] == "checkpoint:dns"
        assert np.isfinite(metrics["nmse_db"]) and np.isfinite(metrics["alp"])
        assert metrics["measured_smnr_db"] == pytest.approx(10.0, abs=1e-9)
        assert len(metrics["per_sequence"]) == 3
        with open(work["eval"] / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3

    def test_metrics_recompute_from_dump(self, work):
        metrics = json.loads((work["eval"] / "metrics.json").read_text())
        results, _ = load_smoothing_results(work["eval"] / "smoothing.dnsc")
        ds = TrajectoryDataset.load(work["data"])
        redone_nmse = nmse_detail(ds.states, [r.point_estimates for r in results]).mean_db
        assert redone_nmse == pytest.approx(metrics["nmse_db"], abs=1e-12)
        assert alp(ds.states, results) == pytest.approx(metrics["alp"], abs=1e-12)

    def test_reference_smoother_runs(self, work, tmp_path):
        out = tmp_path / "eval_ertss"
        assert run("evaluate", "--data", work["data"], "--ertss", "--out", out) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["method"] == "ertss"
        assert np.isfinite(metrics["nmse_db"])

    def test_reference_smoother_refused_without_transition_model(self, tmp_path):
        data = tmp_path / "sdsp.dnsc"
        assert run("generate", "--system", "sdsp", "--n", 1, "--t", 10,
                   "--smnr", 0, "--seed", 0, "--out", data) == 0
        assert run("evaluate", "--data", data, "--ertss", "--out", tmp_path / "e") == 2

    def test_dimension_mismatch(self, work, tmp_path):
        data = tmp_path / "sdsp.dnsc"
        assert run("generate", "--system", "sdsp", "--n", 1, "--t", 10,
                   "--smnr", 0, "--seed", 0, "--out", data) == 0
        assert run("evaluate", "--data", data, "--checkpoint", work["model"],
                   "--out", tmp_path / "e") == 2

    def test_exactly_one_method_required(self, work, tmp_path):
        assert run("evaluate", "--data", work["data"], "--out", tmp_path / "e") == 2
        assert run("evaluate", "--data", work["data"], "--checkpoint", work["model"],
                   "--ertss", "--out", tmp_path / "e") == 2


class TestExperiment:
    manifest = {"systems": ["lorenz"], "smnr_levels_db": [0.0],
                "methods": ["identity"], "realizations": 1, "n_train": 2,
                "train_len": 12, "n_test": 2, "test_len": 16,
                "epochs": 1, "batch_size": 1}

    def test_single_cell_grid(self, tmp_path):
        mpath = tmp_path / "m.json"
        mpath.write_text(json.dumps(self.manifest))
        out = tmp_path / "grid"
        assert run("experiment", "--manifest", mpath, "--out", out) == 0
        lines = (out / "results.csv").read_text().splitlines()
        assert len(lines) == 2 and lines[1].startswith("identity,lorenz,")

    def test_rerun_identical(self, tmp_path):
        mpath = tmp_path / "m.json"
        mpath.write_text(json.dumps(self.manifest))
        a, b = tmp_path / "g1", tmp_path / "g2"
        assert run("experiment", "--manifest", mpath, "--out", a) == 0
        assert run("experiment", "--manifest", mpath, "--out", b) == 0
        assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()

    def test_unknown_manifest_key(self, tmp_path):
        mpath = tmp_path / "m.json"
        mpath.write_text(json.dumps({**self.manifest, "optimizer": "sgd"}))
        assert run("experiment", "--manifest", mpath, "--out", tmp_path / "g") == 2


class TestExportPlots:
    def test_writes_expected_schema(self, work, tmp_path):
        out = tmp_path / "plots"
        assert run("export-plots", "--results", work["eval"],
                   "--trajectories", work["data"], "--out", out) == 0
        files = sorted(out.glob("trajectory_*.csv"))
        assert len(files) == 3
        with open(files[0]) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == (["t"] + [f"x_true_{j}" for j in (1, 2, 3)]
                           + [f"y_{j}" for j in (1, 2, 3)]
                           + [f"mean_{j}" for j in (1, 2, 3)]
                           + [f"std_{j}" for j in (1, 2, 3)])
        assert len(rows) - 1 == 24
        assert [r[0] for r in rows[1:3]] == ["1", "2"]

    def test_std_equals_posterior_scale(self, work, tmp_path):
        out = tmp_path / "plots"
        assert run("export-plots", "--results", work["eval"],
                   "--trajectories", work["data"], "--out", out) == 0
        results, _ = load_smoothing_results(work["eval"] / "smoothing.dnsc")
        with open(out / "trajectory_000.csv") as fh:
            rows = list(csv.DictReader(fh))
        for t, row in enumerate(rows):
            expected = np.sqrt(np.diag(results[0].posteriors[t].cov))
            got = np.array([float(row[f"std_{j}"]) for j in (1, 2, 3)])
            np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)

    def test_missing_inputs(self, work, tmp_path):
        assert run("export-plots", "--results", tmp_path / "nope",
                   "--trajectories", work["data"], "--out", tmp_path / "p") == 2
