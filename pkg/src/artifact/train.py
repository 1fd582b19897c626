"""Supervised L1 training of the graph network with Adam."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ShapeError
from .gn import GNParams, Graph, ModelConfig, init_params, loss_and_grads, trace_forward
from .sim import TrajectoryDataset, interaction_pairs, EnvConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    steps: int = 1000
    eval_interval: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0 or self.eval_interval < 1:
            raise ValueError("steps must be >= 0 and eval_interval >= 1")


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays) -> "OptimizerState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState, config: TrainConfig):
    """Bias-corrected Adam; returns new parameter and state objects (inputs untouched)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state disagree in length")
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p.append(p - config.lr * m_hat / (np.sqrt(v_hat) + config.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, OptimizerState(new_m, new_v, t)


class PackedData:
    """Records of one dataset stacked into dense arrays for fast batching.

    Every record of a dataset has the same node count and topology, so one
    batch is just a slice of the stacked arrays plus precomputed index offsets.
    """

    def __init__(self, dataset: TrajectoryDataset, indices=None):
        recs = dataset.records if indices is None else [dataset.records[i] for i in indices]
        if not recs:
            raise ValueError("empty dataset")
        n = recs[0].state.n
        self.env = dataset.env
        self.n = n
        self.nodes = np.stack(
            [np.hstack([r.state.positions, r.state.velocities, r.state.masses[:, None]]) for r in recs]
        )
        self.targets = np.stack([r.dv for r in recs])
        self.receivers, self.senders = interaction_pairs(dataset.env, n)

    def __len__(self) -> int:
        return len(self.nodes)

    def graph(self, idx) -> tuple[Graph, np.ndarray]:
        idx = np.asarray(idx)
        k, n, e = len(idx), self.n, len(self.receivers)
        offs = np.repeat(np.arange(k) * n, e)
        g = Graph(
            self.nodes[idx].reshape(k * n, -1),
            np.tile(self.receivers, k) + offs,
            np.tile(self.senders, k) + offs,
            np.repeat(np.arange(k), n),
        )
        return g, self.targets[idx].reshape(k * n, -1)


def split_by_simulation(dataset: TrajectoryDataset, holdout: float = 0.1) -> tuple[list[int], list[int]]:
    """Indices of training and held-out records; the last 10% of simulations are held out."""
    sims = sorted({r.sim for r in dataset.records})
    n_hold = int(len(sims) * holdout)
    held = set(sims[len(sims) - n_hold:]) if n_hold else set()
    train_idx = [i for i, r in enumerate(dataset.records) if r.sim not in held]
    hold_idx = [i for i, r in enumerate(dataset.records) if r.sim in held]
    return train_idx, hold_idx


def _packed_l1(params: GNParams, packed: PackedData, chunk: int = 256) -> tuple[float, int]:
    total, count = 0.0, 0
    for start in range(0, len(packed), chunk):
        g, target = packed.graph(np.arange(start, min(start + chunk, len(packed))))
        fp = trace_forward(params, g)
        total += float(np.abs(fp.tape.value(fp.dv) - target).sum())
        count += target.size
    return total, count


def evaluate(params: GNParams, dataset: TrajectoryDataset) -> float:
    """Mean |dv_pred - dv_true| over every record, node and component."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if params.config.dim != dataset.env.dim:
        raise ShapeError(f"model is {params.config.dim}D but dataset is {dataset.env.dim}D")
    by_n: dict[int, list[int]] = {}
    for i, r in enumerate(dataset.records):
        by_n.setdefault(r.state.n, []).append(i)
    total, count = 0.0, 0
    for idx in by_n.values():
        t, c = _packed_l1(params, PackedData(dataset, idx))
        total += t
        count += c
    return total / count


@dataclass
class TrainResult:
    params: GNParams
    curve: list[tuple[int, float, float]] = field(default_factory=list)
    seed: int = 0
    steps: int = 0


def train(
    dataset: TrajectoryDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    init: GNParams | None = None,
) -> TrainResult:
    if model_config.dim != dataset.env.dim:
        raise ShapeError(f"model is {model_config.dim}D but dataset is {dataset.env.dim}D")
    train_idx, hold_idx = split_by_simulation(dataset)
    packed = PackedData(dataset, train_idx)
    held = PackedData(dataset, hold_idx) if hold_idx else packed

    params = init.copy() if init is not None else init_params(model_config, train_config.seed)
    arrays = params.arrays()
    opt = OptimizerState.zeros_like(arrays)
    rng = np.random.default_rng([train_config.seed, 1])
    bs = min(train_config.batch_size, len(packed))

    def held_loss(p):
        t, c = _packed_l1(p, held)
        return t / c

    probe = PackedData(dataset, train_idx[:1024])
    t0, c0 = _packed_l1(params, probe)
    curve = [(0, t0 / c0, held_loss(params))]
    order = rng.permutation(len(packed))
    cursor = 0
    running, n_running = 0.0, 0
    for step in range(1, train_config.steps + 1):
        if cursor + bs > len(order):
            order = rng.permutation(len(packed))
            cursor = 0
        idx = order[cursor : cursor + bs]
        cursor += bs
        graph, target = packed.graph(idx)
        loss, grads = loss_and_grads(params, graph, target)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss {loss} at step {step}")
        arrays, opt = adam_step(arrays, grads, opt, train_config)
        params = GNParams.from_arrays(model_config, arrays)
        running += loss
        n_running += 1
        if step % train_config.eval_interval == 0 or step == train_config.steps:
            ev = held_loss(params)
            curve.append((step, running / n_running, ev))
            log.info("step %d train %.5g eval %.5g", step, running / n_running, ev)
            running, n_running = 0.0, 0
    return TrainResult(params, curve, train_config.seed, train_config.steps)


def write_loss_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_loss", "eval_loss"])
        for step, tr, ev in curve:
            w.writerow([step, format(tr, ".17g"), format(ev, ".17g")])
