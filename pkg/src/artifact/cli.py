"""Command-line driver: simulate -> train -> analyze -> symreg -> generalize.

Configuration comes from an INI file (one section per stage) and is
overridden by flags.  Every stage seed is the master seed plus a fixed offset.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, symreg
from .autodiff import ShapeError
from .gn import ModelConfig, load_checkpoint, save_checkpoint
from .sim import EXPERIMENTS, FORMAT_VERSION, EnvConfig, TrajectoryDataset, generate_dataset, preset
from .train import TrainConfig, train, write_loss_csv

log = logging.getLogger("artifact")

SEED_OFFSETS = {"simulate": 0, "train": 1, "analyze": 2, "symreg": 3, "generalize": 4}

DEFAULTS = {
    "run": {"experiment": "r2-2d", "seed": "0", "out": "runs/default"},
    "simulate": {"n_sims": "500", "n_steps": "100"},
    "model": {"message_dim": "", "hidden": "128", "layers": "3"},
    "train": {
        "lr": "1e-3",
        "beta1": "0.9",
        "beta2": "0.999",
        "eps": "1e-8",
        "batch_size": "32",
        "steps": "20000",
        "eval_interval": "500",
    },
    "analyze": {"n_sims": "100", "n_steps": "100", "max_rows": "50000"},
    "symreg": {
        "population": "200",
        "generations": "100",
        "islands": "4",
        "tournament": "5",
        "p_crossover": "0.7",
        "p_mutation": "0.3",
        "max_depth": "7",
        "const_iters": "3",
        "max_rows": "1000",
    },
    "generalize": {"body_counts": "4 6 8 12", "eval_sims": "50", "n_steps": "100"},
}


class UsageError(Exception):
    """Bad flags or configuration; exits with status 2."""


def load_config(path: str | None) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    cfg.read_dict(DEFAULTS)
    if path:
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg.read(path)
        except configparser.Error as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from None
    return cfg


class Run:
    """Resolved configuration for one command invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.cfg = load_config(args.config)
        for key in ("experiment", "seed", "out"):
            val = getattr(args, key, None)
            if val is not None:
                self.cfg["run"][key] = str(val)
        name = self.cfg["run"]["experiment"]
        if name not in EXPERIMENTS:
            raise UsageError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
        try:
            self.master_seed = int(self.cfg["run"]["seed"])
        except ValueError:
            raise UsageError("seed must be an integer") from None
        self.out = Path(self.cfg["run"]["out"])

    def get(self, section: str, key: str, typ=str, flag: str | None = None):
        val = getattr(self.args, flag or key, None)
        if val is None:
            val = self.cfg[section].get(key, "")
        try:
            return typ(val)
        except (TypeError, ValueError):
            raise UsageError(f"[{section}] {key} = {val!r} is not a valid {typ.__name__}") from None

    def seed(self, stage: str) -> int:
        return self.master_seed + SEED_OFFSETS[stage]

    def env(self, n_bodies: int | None = None) -> EnvConfig:
        n = n_bodies if n_bodies is not None else self.get("simulate", "n_bodies", lambda v: int(v) if v else None)
        try:
            return preset(self.cfg["run"]["experiment"], n)
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def output(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name


def _write_manifest(run: Run, command: str, files: dict) -> None:
    path = run.output("manifest.json")
    manifest = json.loads(path.read_text()) if path.exists() else {"format_version": FORMAT_VERSION}
    manifest["experiment"] = run.cfg["run"]["experiment"]
    manifest["master_seed"] = run.master_seed
    manifest.setdefault("stages", {})[command] = {
        "seed": run.seed(command),
        "files": {k: str(v) for k, v in files.items()},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_dataset(path) -> TrajectoryDataset:
    if not Path(path).is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    return TrajectoryDataset.load(path)


def cmd_simulate(run: Run) -> int:
    env = run.env()
    ds = generate_dataset(env, run.get("simulate", "n_sims", int), run.get("simulate", "n_steps", int), run.seed("simulate"))
    path = Path(run.args.output) if getattr(run.args, "output", None) else run.output("dataset.jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    ds.save(path)
    print(f"records: {len(ds)}")
    print(f"baseline mean |dv|: {ds.mean_abs_dv():.6g}")
    print(f"wrote {path}")
    _write_manifest(run, "simulate", {"dataset": path})
    return 0


def _model_config(run: Run, dim: int) -> ModelConfig:
    raw = run.get("model", "message_dim", str)
    msg_dim = int(raw) if raw not in ("", "None") else dim
    if msg_dim < 1:
        raise UsageError("message_dim must be a positive integer")
    return ModelConfig(dim, msg_dim, run.get("model", "hidden", int), run.get("model", "layers", int))


def _train_config(run: Run) -> TrainConfig:
    try:
        return TrainConfig(
            lr=run.get("train", "lr", float),
            beta1=run.get("train", "beta1", float),
            beta2=run.get("train", "beta2", float),
            eps=run.get("train", "eps", float),
            batch_size=run.get("train", "batch_size", int),
            steps=run.get("train", "steps", int),
            eval_interval=run.get("train", "eval_interval", int),
            seed=run.seed("train"),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(run: Run) -> int:
    ds = _load_dataset(run.args.dataset)
    expected = run.env()
    if ds.env.dim != expected.dim:
        raise UsageError(f"dataset is {ds.env.dim}D but experiment {run.cfg['run']['experiment']} is {expected.dim}D")
    mcfg = _model_config(run, ds.env.dim)
    tcfg = _train_config(run)
    ckpt = Path(run.args.output) if getattr(run.args, "output", None) else run.output("checkpoint.json")
    # Fail on an unusable destination before spending time on training.
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    result = train(ds, mcfg, tcfg)
    save_checkpoint(ckpt, result.params, seed=tcfg.seed, steps=tcfg.steps, extra={"env": ds.env.to_dict()})
    loss_csv = ckpt.with_name(ckpt.stem + "_loss.csv")
    write_loss_csv(loss_csv, result.curve)
    first, last = result.curve[0], result.curve[-1]
    print(f"eval loss {first[2]:.6g} -> {last[2]:.6g} after {tcfg.steps} steps")
    print(f"wrote {ckpt} and {loss_csv}")
    _write_manifest(run, "train", {"checkpoint": ckpt, "loss": loss_csv})
    return 0


def cmd_analyze(run: Run) -> int:
    params, _ = _load_checkpoint(run.args.checkpoint)
    ds = _load_dataset(run.args.dataset)
    if params.config.dim != ds.env.dim:
        raise UsageError(f"checkpoint is {params.config.dim}D but dataset is {ds.env.dim}D")
    table = analysis.record_messages(params, ds, run.get("analyze", "max_rows", int))
    report = analysis.linear_fit(table)
    msg_path = run.output("messages.csv")
    fit_path = run.output("linear_fit.csv")
    table.write_csv(msg_path)
    report.write_csv(fit_path)
    for i, c in enumerate(report.components):
        coefs = " ".join(f"{v:+.4g}" for v in c.coef)
        print(f"e{i}: R2={c.r2:.6f} coef=[{coefs}] intercept={c.intercept:+.4g}")
    _write_manifest(run, "analyze", {"messages": msg_path, "fit": fit_path})
    return 0


def _gp_config(run: Run) -> symreg.GPConfig:
    try:
        return symreg.GPConfig(
            population=run.get("symreg", "population", int),
            generations=run.get("symreg", "generations", int),
            tournament=run.get("symreg", "tournament", int),
            p_crossover=run.get("symreg", "p_crossover", float),
            p_mutation=run.get("symreg", "p_mutation", float),
            max_depth=run.get("symreg", "max_depth", int),
            const_iters=run.get("symreg", "const_iters", int),
            islands=run.get("symreg", "islands", int),
            seed=run.seed("symreg"),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def symreg_inputs(table: analysis.MessageTable, component: int, max_rows: int):
    """Feature columns and target of a strided subsample of the table."""
    n = len(table)
    m = min(n, max_rows)
    idx = (np.arange(m) * n) // m
    data = {k: v[idx] for k, v in table.columns().items()}
    return data, table.messages[idx, component]


def cmd_symreg(run: Run) -> int:
    path = Path(run.args.messages)
    if not path.is_file():
        raise FileNotFoundError(f"message table not found: {path}")
    table = analysis.MessageTable.read_csv(path)
    k = run.args.component
    if not 0 <= k < table.message_dim:
        raise UsageError(f"component {k} out of range for {table.message_dim} message components")
    data, y = symreg_inputs(table, k, run.get("symreg", "max_rows", int))
    front = symreg.search(data, y, _gp_config(run))
    best, c = symreg.select_best(front)
    front_path = run.output(f"front_e{k}.csv")
    symreg.write_front_csv(front_path, front)
    best_path = run.output(f"selected_e{k}.txt")
    best_path.write_text(symreg.to_infix(best) + "\n")
    for ci, e, m in front.items():
        print(f"{ci:3d}  {m:.6g}  {symreg.to_infix(e)}")
    print(f"selected (complexity {c}): {symreg.to_infix(best)}")
    _write_manifest(run, "symreg", {"front": front_path, "selected": best_path})
    return 0


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_generalize(run: Run) -> int:
    models = [_load_checkpoint(p)[0] for p in run.args.checkpoints]
    counts = run.args.body_counts or [int(v) for v in run.cfg["generalize"]["body_counts"].split()]
    env = run.env(n_bodies=max(counts))
    for p, path in zip(models, run.args.checkpoints):
        if p.config.dim != env.dim:
            raise UsageError(f"{path} is {p.config.dim}D but experiment is {env.dim}D")
    matrix = analysis.generalization_sweep(
        models,
        env,
        counts,
        run.get("generalize", "eval_sims", int),
        run.seed("generalize"),
        n_steps=run.get("generalize", "n_steps", int),
    )
    out = run.output("generalization.csv")
    names = [Path(p).stem for p in run.args.checkpoints]
    analysis.write_sweep_csv(out, matrix, names, counts)
    print("model," + ",".join(str(n) for n in counts))
    for name, row in zip(names, matrix):
        print(name + "," + ",".join(f"{v:.6g}" for v in row))
    _write_manifest(run, "generalize", {"sweep": out})
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [run], [simulate], [model], [train], ... sections")
    common.add_argument("--seed", type=int, help="master seed; stage seeds are fixed offsets from it")
    common.add_argument("--out", help="output directory")
    common.add_argument("--experiment", choices=EXPERIMENTS)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="artifact", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a trajectory dataset")
    s.add_argument("--n-sims", dest="n_sims", type=int)
    s.add_argument("--n-steps", dest="n_steps", type=int)
    s.add_argument("--n-bodies", dest="n_bodies", type=int)
    s.add_argument("--output", help="dataset path (default OUT/dataset.jsonl)")

    t = sub.add_parser("train", parents=[common], help="train a graph network on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--message-dim", dest="message_dim", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--eval-interval", dest="eval_interval", type=int)
    t.add_argument("--output", help="checkpoint path (default OUT/checkpoint.json)")

    a = sub.add_parser("analyze", parents=[common], help="record messages and fit them to true forces")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--max-rows", dest="max_rows", type=int)

    r = sub.add_parser("symreg", parents=[common], help="symbolic regression on one message component")
    r.add_argument("--messages", required=True, help="message table CSV from 'analyze'")
    r.add_argument("--component", type=int, default=0)
    r.add_argument("--population", type=int)
    r.add_argument("--generations", type=int)
    r.add_argument("--islands", type=int)
    r.add_argument("--max-rows", dest="max_rows", type=int)

    g = sub.add_parser("generalize", parents=[common], help="loss vs body count for several checkpoints")
    g.add_argument("--checkpoints", nargs="+", required=True)
    g.add_argument("--body-counts", dest="body_counts", type=int, nargs="+")
    g.add_argument("--eval-sims", dest="eval_sims", type=int)
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "analyze": cmd_analyze,
    "symreg": cmd_symreg,
    "generalize": cmd_generalize,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](Run(args))
    except UsageError as exc:
        print(f"artifact {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ShapeError as exc:
        print(f"artifact {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"artifact {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
