import csv
import json

import numpy as np
import pytest

from artifact.analysis import MessageTable
from artifact.cli import main
from artifact.gn import ModelConfig, init_params, save_checkpoint
from artifact.sim import EnvConfig, Law, Record, SystemState, TrajectoryDataset
from artifact.symreg import parse_infix, read_front_csv


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    assert run("simulate", "--experiment", "r2-2d", "--n-sims", 2, "--n-steps", 5, "--out", out) == 0
    return out


class TestSimulate:
    def test_small_run(self, tiny):
        lines = (tiny / "dataset.jsonl").read_text().splitlines()
        assert 1 <= len(lines) - 1 <= 10
        assert json.loads(lines[0])["format_version"] == 1
        manifest = json.loads((tiny / "manifest.json").read_text())
        assert manifest["format_version"] == 1 and "simulate" in manifest["stages"]

    def test_prints_summary(self, tmp_path, capsys):
        run("simulate", "--n-sims", 1, "--n-steps", 3, "--out", tmp_path)
        out = capsys.readouterr().out
        assert "records:" in out and "baseline mean |dv|:" in out

    def test_byte_identical_rerun(self, tmp_path):
        for name in ("a", "b"):
            assert run("simulate", "--seed", 5, "--n-sims", 3, "--n-steps", 4, "--out", tmp_path / name) == 0
        assert (tmp_path / "a" / "dataset.jsonl").read_bytes() == (tmp_path / "b" / "dataset.jsonl").read_bytes()

    def test_unknown_experiment_flag(self, tmp_path):
        assert run("simulate", "--experiment", "r3-4d", "--out", tmp_path) == 2

    def test_unknown_experiment_in_config(self, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[run]\nexperiment = r3-4d\n")
        assert run("simulate", "--config", cfg, "--out", tmp_path) == 2

    def test_config_file_then_flags(self, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[simulate]\nn_sims = 1\nn_steps = 2\n")
        assert run("simulate", "--config", cfg, "--n-steps", 3, "--out", tmp_path) == 0
        header = json.loads((tmp_path / "dataset.jsonl").read_text().splitlines()[0])
        assert header["n_sims"] == 1 and header["n_steps"] == 3

    def test_bad_config_value(self, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[simulate]\nn_sims = many\n")
        assert run("simulate", "--config", cfg, "--out", tmp_path) == 2

    def test_missing_config(self, tmp_path):
        assert run("simulate", "--config", tmp_path / "nope.ini", "--out", tmp_path) == 2


class TestTrain:
    @pytest.mark.parametrize("L", [2, 3, 100])
    def test_message_dim_flag(self, tiny, tmp_path, L):
        ck = tmp_path / "c.json"
        argv = ["train", "--dataset", tiny / "dataset.jsonl", "--message-dim", L, "--hidden", 8, "--steps", 2]
        assert run(*argv, "--eval-interval", 1, "--out", tmp_path, "--output", ck) == 0
        assert json.loads(ck.read_text())["config"]["message_dim"] == L
        rows = list(csv.reader(open(tmp_path / "c_loss.csv")))
        assert rows[0] == ["step", "train_loss", "eval_loss"] and len(rows) == 4

    def test_overfit_smoke(self, tiny, tmp_path):
        ck = tmp_path / "c.json"
        argv = ["train", "--dataset", tiny / "dataset.jsonl", "--steps", 300, "--eval-interval", 100]
        assert run(*argv, "--out", tmp_path, "--output", ck) == 0
        rows = list(csv.DictReader(open(tmp_path / "c_loss.csv")))
        assert float(rows[-1]["eval_loss"]) < 0.5 * float(rows[0]["eval_loss"])

    def test_missing_dataset(self, tmp_path, capsys):
        assert run("train", "--dataset", tmp_path / "none.jsonl", "--out", tmp_path) == 1
        assert "none.jsonl" in capsys.readouterr().err

    def test_dimension_mismatch(self, tiny, tmp_path):
        assert run("train", "--experiment", "r2-3d", "--dataset", tiny / "dataset.jsonl", "--out", tmp_path) == 2

    def test_unwritable_checkpoint_leaves_nothing(self, tiny, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        target = blocker / "c.json"
        argv = ["train", "--dataset", tiny / "dataset.jsonl", "--hidden", 4, "--steps", 1]
        assert run(*argv, "--out", tmp_path / "o", "--output", target) != 0
        assert blocker.read_text() == ""
        assert not (tmp_path / "o" / "checkpoint.json").exists()


def linear_force_checkpoint(path, A, c):
    """phi^e maps its input to A @ (sender pos - receiver pos) + c exactly.

    Width-4 hidden layers carry relu(d) and relu(-d); the output layer takes
    their difference.  On unit-mass pairs at unit distance the 1/r^2 force
    equals the separation, so the messages are an exact linear map of forces.
    """
    cfg = ModelConfig(2, 2, hidden=4, layers=3)
    p = init_params(cfg, 0)
    nd = cfg.node_dim
    W0 = np.zeros((2 * nd, 4))
    for k in range(2):
        W0[k, k], W0[nd + k, k] = -1.0, 1.0
        W0[k, 2 + k], W0[nd + k, 2 + k] = 1.0, -1.0
    layers = [(W0, np.zeros((1, 4)))] + [(np.eye(4), np.zeros((1, 4))) for _ in range(2)]
    out = np.vstack([np.asarray(A).T, -np.asarray(A).T])
    layers.append((out, np.asarray(c, dtype=float).reshape(1, 2)))
    p.edge = layers
    save_checkpoint(path, p, seed=0, steps=0)


def unit_pair_dataset(path, n=40):
    env = EnvConfig(Law.INVERSE_R2, dim=2, n_bodies=2)
    rng = np.random.default_rng(0)
    recs = []
    for i, th in enumerate(rng.uniform(0, 2 * np.pi, n)):
        base = rng.uniform(-1, 1, 2)
        pos = np.array([base, base + [np.cos(th), np.sin(th)]])
        recs.append(Record(SystemState([1.0, 1.0], pos, rng.normal(0, 0.1, (2, 2))), np.zeros((2, 2)), i, 0))
    TrajectoryDataset(env, 0, recs, n, 1).save(path)


class TestAnalyze:
    def test_hand_built_linear_model(self, tmp_path, capsys):
        linear_force_checkpoint(tmp_path / "lin.json", [[2.0, -1.0], [0.5, 3.0]], [0.1, -0.2])
        unit_pair_dataset(tmp_path / "d.jsonl")
        assert run("analyze", "--checkpoint", tmp_path / "lin.json", "--dataset", tmp_path / "d.jsonl", "--out", tmp_path) == 0
        rows = list(csv.DictReader(open(tmp_path / "linear_fit.csv")))
        assert len(rows) == 2
        for row, coef in zip(rows, [[2.0, -1.0], [0.5, 3.0]]):
            assert float(row["r2"]) == pytest.approx(1.0, abs=1e-12)
            assert [float(row["coef_fx"]), float(row["coef_fy"])] == pytest.approx(coef, abs=1e-10)
        out = capsys.readouterr().out
        assert out.count("R2=") == 2
        table = MessageTable.read_csv(tmp_path / "messages.csv")
        assert len(table) == 80

    def test_dimension_mismatch(self, tiny, tmp_path):
        save_checkpoint(tmp_path / "c3.json", init_params(ModelConfig(3, 3, hidden=4), 0), seed=0, steps=0)
        argv = ["analyze", "--checkpoint", tmp_path / "c3.json", "--dataset", tiny / "dataset.jsonl"]
        assert run(*argv, "--out", tmp_path) == 2

    def test_corrupt_checkpoint(self, tiny, tmp_path, capsys):
        (tmp_path / "bad.json").write_text("{not json")
        argv = ["analyze", "--checkpoint", tmp_path / "bad.json", "--dataset", tiny / "dataset.jsonl"]
        assert run(*argv, "--out", tmp_path / "o") == 1
        assert "bad.json" in capsys.readouterr().err
        assert not (tmp_path / "o" / "messages.csv").exists()


@pytest.fixture(scope="module")
def planted_csv(tmp_path_factory):
    rng = np.random.default_rng(3)
    n = 200
    delta = rng.uniform(-1, 1, (n, 2))
    r = np.sqrt((delta**2).sum(1))
    m1, m2 = rng.uniform(0.5, 2, n), rng.uniform(0.5, 2, n)
    target = m2 * delta[:, 0] / r
    msgs = np.column_stack([target, rng.normal(size=n)])
    z = np.zeros(n, dtype=np.int64)
    table = MessageTable(2, z, z, z, np.column_stack([delta, r, m1, m2]), msgs, delta)
    path = tmp_path_factory.mktemp("sr") / "messages.csv"
    table.write_csv(path)
    return path


class TestSymreg:
    args = ("--population", 60, "--generations", 20)

    def test_planted_recovery_and_determinism(self, planted_csv, tmp_path):
        for name in ("a", "b"):
            assert run("symreg", "--messages", planted_csv, *self.args, "--out", tmp_path / name) == 0
        front = read_front_csv(tmp_path / "a" / "front_e0.csv")
        assert any(m < 1e-20 for c, _, m in front.items() if c <= 5)
        sel = (tmp_path / "a" / "selected_e0.txt").read_text()
        assert sel == (tmp_path / "b" / "selected_e0.txt").read_text()
        assert parse_infix(sel.strip()) is not None

    def test_component_out_of_range(self, planted_csv, tmp_path):
        assert run("symreg", "--messages", planted_csv, "--component", 2, "--out", tmp_path) == 2

    def test_malformed_csv(self, tmp_path):
        (tmp_path / "m.csv").write_text("x,y\n1,2\n")
        assert run("symreg", "--messages", tmp_path / "m.csv", "--out", tmp_path) == 1


class TestGeneralize:
    def test_matrix_csv(self, tmp_path):
        for i in range(2):
            save_checkpoint(tmp_path / f"m{i}.json", init_params(ModelConfig(3, 3, hidden=4), i), seed=i, steps=0)
        argv = ["generalize", "--experiment", "r2-3d", "--checkpoints", tmp_path / "m0.json", tmp_path / "m1.json"]
        assert run(*argv, "--body-counts", 3, 5, "--eval-sims", 1, "--out", tmp_path) == 0
        rows = list(csv.reader(open(tmp_path / "generalization.csv")))
        assert rows[0] == ["model", "3", "5"]
        assert [r[0] for r in rows[1:]] == ["m0", "m1"]

    def test_missing_checkpoint_named(self, tmp_path, capsys):
        argv = ["generalize", "--experiment", "r2-3d", "--checkpoints", tmp_path / "ghost.json"]
        assert run(*argv, "--out", tmp_path) == 1
        assert "ghost.json" in capsys.readouterr().err
