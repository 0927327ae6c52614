"""Command-line behavior: artifacts, determinism, exit codes, exports."""

import hashlib
import json

import numpy as np
import pytest

from geospd import cli
from geospd.config import RunConfig
from geospd.errors import InvalidInput
from geospd.gradcheck import run_checks


def run(args):
    return cli.main(args)


def gen_dataset(tmp_path, name="ds", seed=0, trials=24, profile="default"):
    out = tmp_path / name
    code = run(["gen-data", "--out", str(out), "--trials", str(trials),
                "--channels", "6", "--epochs", "3", "--samples", "32",
                "--sample-rate", "64", "--seed", str(seed), "--profile", profile])
    assert code == 0
    return out


def train_args(ds, out, extra=()):
    return ["train", "--dataset", str(ds), "--out", str(out), "--d", "6", "--l", "3",
            "--tau-top", "2", "--epochs", "2", "--batch-size", "8", "--seed", "1",
            *extra]


class TestGenData:
    def test_writes_three_files(self, tmp_path):
        out = gen_dataset(tmp_path)
        assert {p.name for p in out.iterdir()} == {"manifest.json", "epochs.f32",
                                                   "labels.u8"}

    def test_same_seed_identical_checksums(self, tmp_path):
        a = gen_dataset(tmp_path, "a", seed=7)
        b = gen_dataset(tmp_path, "b", seed=7)
        for name in ("manifest.json", "epochs.f32", "labels.u8"):
            ha = hashlib.sha256((a / name).read_bytes()).hexdigest()
            hb = hashlib.sha256((b / name).read_bytes()).hexdigest()
            assert ha == hb

    def test_flags_reflected_in_manifest(self, tmp_path):
        out = tmp_path / "ds"
        assert run(["gen-data", "--out", str(out), "--classes", "2",
                    "--trials", "40", "--channels", "6", "--epochs", "3",
                    "--samples", "32", "--sample-rate", "64"]) == 0
        doc = json.loads((out / "manifest.json").read_text())
        assert doc["num_classes"] == 2 and doc["num_trials"] == 40


class TestTrain:
    def test_zero_epochs_writes_initial_checkpoint(self, tmp_path, capsys):
        ds = gen_dataset(tmp_path)
        out = tmp_path / "run"
        args = train_args(ds, out)
        args[args.index("--epochs") + 1] = "0"
        assert run(args) == 0
        assert (out / "checkpoint.bin").exists()
        assert (out / "metrics.json").exists()
        assert (out / "loss.csv").read_text().strip() == "epoch,loss,ce,geotop"

    def test_artifacts_and_determinism(self, tmp_path, capsys):
        ds = gen_dataset(tmp_path)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert run(train_args(ds, out1)) == 0
        assert run(train_args(ds, out2)) == 0
        for name in ("checkpoint.bin", "metrics.json", "loss.csv", "config.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_effective_config_round_trips(self, tmp_path):
        ds = gen_dataset(tmp_path)
        out = tmp_path / "run"
        assert run(train_args(ds, out)) == 0
        doc = json.loads((out / "config.json").read_text())
        cfg = RunConfig.from_dict(doc)
        assert cfg.to_dict() == doc

    def test_unknown_config_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"dataset": "x", "learning_rate": 0.1}))
        assert run(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_missing_dataset_is_data_error(self, tmp_path):
        assert run(["train", "--dataset", str(tmp_path / "nope"),
                    "--out", str(tmp_path / "o")]) == 3


class TestEval:
    def test_matches_training_metrics(self, tmp_path, capsys):
        ds = gen_dataset(tmp_path)
        out = tmp_path / "run"
        assert run(train_args(ds, out)) == 0
        trained = json.loads((out / "metrics.json").read_text())
        capsys.readouterr()
        assert run(["eval", "--checkpoint", str(out / "checkpoint.bin"),
                    "--dataset", str(ds), "--split", "test"]) == 0
        evaluated = json.loads(capsys.readouterr().out)
        assert evaluated["test"] == trained["test"]

    def test_corrupted_checkpoint_exit_code(self, tmp_path):
        ds = gen_dataset(tmp_path)
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"albatross")
        assert run(["eval", "--checkpoint", str(bad), "--dataset", str(ds)]) == 3


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("export")
    ds = gen_dataset(tmp)
    out = tmp / "run"
    assert run(train_args(ds, out)) == 0
    return tmp, ds, out


class TestExport:
    def test_attention_rows_sum_to_one(self, trained):
        tmp, ds, out = trained
        dest = tmp / "exp_att"
        assert run(["export", "--checkpoint", str(out / "checkpoint.bin"),
                    "--dataset", str(ds), "--what", "attention",
                    "--out", str(dest), "--limit", "3"]) == 0
        files = sorted((dest / "attention").iterdir())
        assert len(files) == 3
        for f in files:
            rows = np.loadtxt(f, delimiter=",")
            np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-9)

    def test_tangent_width(self, trained):
        tmp, ds, out = trained
        dest = tmp / "exp_tan"
        assert run(["export", "--checkpoint", str(out / "checkpoint.bin"),
                    "--dataset", str(ds), "--what", "tangent",
                    "--out", str(dest), "--limit", "4"]) == 0
        table = np.loadtxt(dest / "tangent.csv", delimiter=",")
        l, T = 3, 3
        assert table.shape == (4, l * (l + 1) // 2 * T)

    def test_adjacency_sparsity(self, trained):
        tmp, ds, out = trained
        dest = tmp / "exp_adj"
        assert run(["export", "--checkpoint", str(out / "checkpoint.bin"),
                    "--dataset", str(ds), "--what", "adjacency",
                    "--out", str(dest), "--limit", "2"]) == 0
        files = sorted((dest / "adjacency").iterdir())
        assert len(files) == 2 * 3
        tau_top, n = 2, 6
        for f in files:
            adj = np.loadtxt(f, delimiter=",")
            assert (adj != 0).sum() <= 2 * n * tau_top
            np.testing.assert_array_equal(adj, adj.T)


class TestCheckGrad:
    def test_default_passes(self, capsys):
        assert run(["check-grad", "--seeds", "1"]) == 0
        out = capsys.readouterr().out
        assert "[PASS]" in out and "[FAIL]" not in out

    def test_module_filter(self, capsys):
        assert run(["check-grad", "--module", "spd-layers", "--seeds", "1"]) == 0
        out = capsys.readouterr().out
        assert "spd-layers/" in out and "pipeline/" not in out

    def test_unknown_module_rejected(self):
        assert run(["check-grad", "--module", "nonsense"]) == 2

    def test_injected_corruption_names_operation(self):
        results = run_checks(modules=["spd-layers"], seeds=[0], corrupt="bimap")
        failed = [r for r in results if not r.passed]
        assert [r.name for r in failed] == ["bimap"]


class TestEnvironment:
    def test_bad_thread_env_rejected(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GEO_SPD_THREADS", "many")
        assert run(["check-grad", "--seeds", "1"]) == 2

    def test_thread_env_accepted(self, monkeypatch, capsys):
        monkeypatch.setenv("GEO_SPD_THREADS", "4")
        assert run(["check-grad", "--module", "autodiff", "--seeds", "1"]) == 0
