"""Message recording, message-vs-force linear fits and the body-count sweep."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .autodiff import ShapeError
from .gn import GNParams, message_forward, node_attributes
from .sim import EnvConfig, Law, TrajectoryDataset, generate_dataset, interaction_pairs
from .train import evaluate

AXES = ("x", "y", "z")


class DegenerateFitError(ValueError):
    pass


def feature_names(dim: int) -> list[str]:
    return [f"d{a}" for a in AXES[:dim]] + ["r", "m1", "m2"]


@dataclass
class MessageTable:
    """One row per (snapshot, edge).

    ``features`` columns follow :func:`feature_names`: separation components
    (sender minus receiver), distance, receiver mass, sender mass.  ``forces``
    is the sender's true contribution to the receiver's acceleration.
    """

    dim: int
    record: np.ndarray
    receiver: np.ndarray
    sender: np.ndarray
    features: np.ndarray
    messages: np.ndarray
    forces: np.ndarray

    def __len__(self) -> int:
        return len(self.record)

    @property
    def message_dim(self) -> int:
        return self.messages.shape[1]

    def columns(self) -> dict[str, np.ndarray]:
        return {name: self.features[:, i] for i, name in enumerate(feature_names(self.dim))}

    def header(self) -> list[str]:
        return (
            ["record", "receiver", "sender"]
            + feature_names(self.dim)
            + [f"e{i}" for i in range(self.message_dim)]
            + [f"f{a}" for a in AXES[: self.dim]]
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for i in range(len(self)):
                w.writerow(
                    [int(self.record[i]), int(self.receiver[i]), int(self.sender[i])]
                    + [format(v, ".17g") for v in self.features[i]]
                    + [format(v, ".17g") for v in self.messages[i]]
                    + [format(v, ".17g") for v in self.forces[i]]
                )

    @classmethod
    def read_csv(cls, path) -> "MessageTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValueError(f"{path}: empty message table") from None
            rows = list(reader)
        if header[:3] != ["record", "receiver", "sender"] or "r" not in header:
            raise ValueError(f"{path}: not a message table (bad header)")
        dim = header.index("r") - 3
        if dim not in (2, 3) or header[3 : 3 + dim + 3] != feature_names(dim):
            raise ValueError(f"{path}: unexpected feature columns")
        n_msg = sum(1 for h in header if h.startswith("e") and h[1:].isdigit())
        try:
            a = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
        except ValueError as exc:
            raise ValueError(f"{path}: malformed row ({exc})") from None
        nf = dim + 3
        return cls(
            dim,
            a[:, 0].astype(np.int64),
            a[:, 1].astype(np.int64),
            a[:, 2].astype(np.int64),
            a[:, 3 : 3 + nf],
            a[:, 3 + nf : 3 + nf + n_msg],
            a[:, 3 + nf + n_msg :],
        )


def true_forces(law: Law, delta: np.ndarray, m_recv: np.ndarray, m_send: np.ndarray, k: float = 1.0) -> np.ndarray:
    """Per-receiver-mass force of each row from the analytic law."""
    r = np.sqrt(np.einsum("ij,ij->i", delta, delta))
    if law is Law.INVERSE_R:
        return m_send[:, None] * delta / (r**2)[:, None]
    if law is Law.INVERSE_R2:
        return m_send[:, None] * delta / (r**3)[:, None]
    return k * r[:, None] * delta / m_recv[:, None]


def record_messages(params: GNParams, dataset: TrajectoryDataset, max_rows: int) -> MessageTable:
    """Messages of an evenly strided sample of all edges in the dataset.

    Edges are enumerated in (record, edge) order; ``max_rows`` of them are
    taken at a fixed fractional stride, so the result depends only on the inputs.
    """
    if params.config.dim != dataset.env.dim:
        raise ShapeError(f"model is {params.config.dim}D but dataset is {dataset.env.dim}D")
    env = dataset.env
    counts = np.array([len(interaction_pairs(env, r.state.n)[0]) for r in dataset.records], dtype=np.int64)
    total = int(counts.sum())
    m = min(int(max_rows), total)
    flat = (np.arange(m, dtype=np.int64) * total) // m if m else np.zeros(0, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rec_of = np.searchsorted(starts, flat, side="right") - 1
    edge_of = flat - starts[rec_of]

    d = env.dim
    recv_attr = np.empty((m, 2 * d + 1))
    send_attr = np.empty((m, 2 * d + 1))
    recv_idx = np.empty(m, dtype=np.int64)
    send_idx = np.empty(m, dtype=np.int64)
    for rec in np.unique(rec_of):
        rows = np.nonzero(rec_of == rec)[0]
        state = dataset.records[rec].state
        recv, send = interaction_pairs(env, state.n)
        attrs = node_attributes(state)
        e = edge_of[rows]
        recv_idx[rows], send_idx[rows] = recv[e], send[e]
        recv_attr[rows] = attrs[recv[e]]
        send_attr[rows] = attrs[send[e]]

    delta = send_attr[:, :d] - recv_attr[:, :d]
    r = np.sqrt(np.einsum("ij,ij->i", delta, delta))
    m_recv, m_send = recv_attr[:, -1], send_attr[:, -1]
    feats = np.column_stack([delta, r, m_recv, m_send])
    msgs = message_forward(params, recv_attr, send_attr) if m else np.zeros((0, params.config.message_dim))
    forces = true_forces(env.law, delta, m_recv, m_send, env.spring_k)
    return MessageTable(d, rec_of, recv_idx, send_idx, feats, msgs, forces)


@dataclass
class ComponentFit:
    coef: np.ndarray
    intercept: float
    r2: float
    rms: float


@dataclass
class LinearFitReport:
    components: list[ComponentFit]

    def write_csv(self, path) -> None:
        dim = len(self.components[0].coef) if self.components else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["component"] + [f"coef_f{a}" for a in AXES[:dim]] + ["intercept", "r2", "residual_rms"])
            for i, c in enumerate(self.components):
                w.writerow(
                    [i]
                    + [format(v, ".17g") for v in c.coef]
                    + [format(c.intercept, ".17g"), format(c.r2, ".17g"), format(c.rms, ".17g")]
                )


def ols(X: np.ndarray, y: np.ndarray, intercept: bool = True) -> tuple[np.ndarray, float]:
    """Least squares via the normal equations, solved by LU with partial pivoting.

    Raises DegenerateFitError when the design matrix is (numerically) rank deficient.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    A = np.column_stack([X, np.ones(len(X))]) if intercept else X
    if A.shape[0] < A.shape[1]:
        raise DegenerateFitError(f"{A.shape[0]} rows for {A.shape[1]} unknowns")
    # Column scaling keeps the pivot test meaningful when force magnitudes differ wildly.
    scale = np.sqrt(np.einsum("ij,ij->j", A, A))
    if np.any(scale == 0):
        raise DegenerateFitError(f"design column(s) {np.nonzero(scale == 0)[0].tolist()} are all zero")
    As = A / scale
    G = As.T @ As
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(G, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if pivots.min() < 1e-12 * pivots.max():
        raise DegenerateFitError(
            f"normal matrix is rank deficient (pivot ratio {pivots.min() / pivots.max():.3g})"
        )
    beta = scipy.linalg.lu_solve((lu, piv), As.T @ y) / scale
    return (beta[:-1], float(beta[-1])) if intercept else (beta, 0.0)


def r_squared(y: np.ndarray, pred: np.ndarray) -> float:
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot <= 1e-24 * max(1.0, float(np.sum(y**2))):
        return 0.0
    return 1.0 - ss_res / ss_tot


def linear_fit(table: MessageTable) -> LinearFitReport:
    """Fit each message component as a linear function of the true force components."""
    F = table.forces
    if len(F) < table.dim + 2:
        raise DegenerateFitError(f"need at least {table.dim + 2} rows, got {len(F)}")
    comps = []
    for j in range(table.message_dim):
        y = table.messages[:, j]
        coef, b = ols(F, y)
        pred = F @ coef + b
        comps.append(ComponentFit(coef, b, r_squared(y, pred), float(np.sqrt(np.mean((y - pred) ** 2)))))
    return LinearFitReport(comps)


def generalization_sweep(
    models: Sequence[GNParams],
    env: EnvConfig,
    body_counts: Sequence[int],
    eval_sims: int,
    seed: int,
    n_steps: int = 100,
) -> np.ndarray:
    """Loss matrix (model x body count).

    Each column's dataset is generated once from ``seed`` and shared by all models.
    """
    for p in models:
        if p.config.dim != env.dim:
            raise ShapeError(f"model is {p.config.dim}D but the environment is {env.dim}D")
    if any(n < 2 for n in body_counts):
        raise ValueError("body counts must be >= 2")
    out = np.empty((len(models), len(body_counts)))
    for j, n in enumerate(body_counts):
        ds = generate_dataset(env.with_bodies(n), eval_sims, n_steps, seed)
        for i, p in enumerate(models):
            out[i, j] = evaluate(p, ds)
    return out


def write_sweep_csv(path, matrix: np.ndarray, names: Sequence[str], body_counts: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model"] + [str(n) for n in body_counts])
        for name, row in zip(names, matrix):
            w.writerow([name] + [format(v, ".17g") for v in row])
