"""Ground-truth n-body and string simulators.

Forces are reported per unit receiver mass (i.e. as the sender's contribution
to the receiver's acceleration).  Gravitational and spring constants are 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
MAX_RESAMPLE = 100


class SingularityError(ValueError):
    """Two interacting bodies are closer than the softening threshold."""


class TopologyError(ValueError):
    """A spring force was requested between nodes that are not chain neighbours."""


class Law(str, Enum):
    INVERSE_R = "InverseR"
    INVERSE_R2 = "InverseR2"
    SPRING_R2 = "SpringR2"

    @property
    def is_nbody(self) -> bool:
        return self is not Law.SPRING_R2


@dataclass(frozen=True)
class EnvConfig:
    law: Law
    dim: int = 2
    n_bodies: int = 6
    dt: float = 0.01
    gravity: tuple[float, ...] = ()
    spring_k: float = 1.0
    softening_min_r: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "law", Law(self.law))
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.n_bodies < 1:
            raise ValueError("n_bodies must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.softening_min_r > 0:
            raise ValueError("softening_min_r must be positive")
        if self.law is Law.SPRING_R2:
            if self.dim != 2:
                raise ValueError("the string environment is 2D only")
            if self.n_bodies < 2:
                raise ValueError("the string needs at least two nodes")
            if len(self.gravity) != self.dim:
                raise ValueError("SpringR2 needs a gravity vector of length dim")

    @property
    def g(self) -> np.ndarray:
        if self.law is not Law.SPRING_R2:
            return np.zeros(self.dim)
        return np.asarray(self.gravity, dtype=np.float64)

    def with_bodies(self, n: int) -> "EnvConfig":
        d = self.to_dict()
        d["n_bodies"] = n
        return EnvConfig.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "law": self.law.value,
            "dim": self.dim,
            "n_bodies": self.n_bodies,
            "dt": self.dt,
            "gravity": list(self.gravity),
            "spring_k": self.spring_k,
            "softening_min_r": self.softening_min_r,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        return cls(
            law=Law(d["law"]),
            dim=int(d["dim"]),
            n_bodies=int(d["n_bodies"]),
            dt=float(d["dt"]),
            gravity=tuple(d.get("gravity", ())),
            spring_k=float(d.get("spring_k", 1.0)),
            softening_min_r=float(d.get("softening_min_r", 0.05)),
        )


# Experiment presets used by the CLI.
def preset(name: str, n_bodies: int | None = None) -> EnvConfig:
    if name == "r1-2d":
        return EnvConfig(Law.INVERSE_R, dim=2, n_bodies=n_bodies or 6, dt=0.01)
    if name == "r2-2d":
        return EnvConfig(Law.INVERSE_R2, dim=2, n_bodies=n_bodies or 6, dt=0.01)
    if name == "r2-3d":
        return EnvConfig(Law.INVERSE_R2, dim=3, n_bodies=n_bodies or 6, dt=0.01)
    if name == "string-2d":
        return EnvConfig(
            Law.SPRING_R2, dim=2, n_bodies=n_bodies or 10, dt=0.005, gravity=(0.0, -1.0)
        )
    raise KeyError(name)


EXPERIMENTS = ("r1-2d", "r2-2d", "r2-3d", "string-2d")


@dataclass
class SystemState:
    masses: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    fixed: np.ndarray = None

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=np.float64)
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.velocities = np.atleast_2d(np.asarray(self.velocities, dtype=np.float64))
        n = len(self.masses)
        if self.fixed is None:
            self.fixed = np.zeros(n, dtype=bool)
        self.fixed = np.asarray(self.fixed, dtype=bool)
        if self.positions.shape[0] != n or self.velocities.shape != self.positions.shape:
            raise ValueError("row counts of masses, positions and velocities disagree")
        if len(self.fixed) != n:
            raise ValueError("fixed flags length disagrees with masses")
        if np.any(self.masses <= 0):
            raise ValueError("masses must be positive")

    @property
    def n(self) -> int:
        return len(self.masses)

    def copy(self) -> "SystemState":
        return SystemState(
            self.masses.copy(), self.positions.copy(), self.velocities.copy(), self.fixed.copy()
        )


def _force_law(law: Law, m_recv: float, m_send: float, delta: np.ndarray, k: float) -> np.ndarray:
    r = float(np.sqrt(np.dot(delta, delta)))
    if law is Law.INVERSE_R:
        return m_send * delta / r**2
    if law is Law.INVERSE_R2:
        return m_send * delta / r**3
    return k * r * delta / m_recv


def pairwise_force(
    env: EnvConfig,
    recv_pos,
    recv_mass: float,
    send_pos,
    send_mass: float,
    *,
    recv_index: int | None = None,
    send_index: int | None = None,
) -> np.ndarray:
    """Acceleration of the receiver caused by the sender.

    For the string law both indices must be given and must be chain neighbours.
    """
    delta = np.asarray(send_pos, dtype=np.float64) - np.asarray(recv_pos, dtype=np.float64)
    r = float(np.sqrt(np.dot(delta, delta)))
    if r < env.softening_min_r:
        raise SingularityError(f"pair distance {r:.3g} below {env.softening_min_r}")
    if env.law is Law.SPRING_R2:
        if recv_index is None or send_index is None or abs(recv_index - send_index) != 1:
            raise TopologyError("spring forces act only between adjacent string nodes")
    return _force_law(env.law, recv_mass, send_mass, delta, env.spring_k)


def interaction_pairs(env: EnvConfig, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Receiver and sender index arrays of every interacting ordered pair."""
    if env.law is Law.SPRING_R2:
        a = np.arange(n - 1)
        recv = np.concatenate([a, a + 1])
        send = np.concatenate([a + 1, a])
        order = np.lexsort((send, recv))
        return recv[order], send[order]
    recv, send = np.nonzero(~np.eye(n, dtype=bool))
    return recv, send


def pair_forces(env: EnvConfig, state: SystemState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised pairwise_force over every interacting pair.

    Returns (receivers, senders, forces) with forces of shape (n_pairs, D).
    """
    recv, send = interaction_pairs(env, state.n)
    delta = state.positions[send] - state.positions[recv]
    r = np.sqrt(np.einsum("ij,ij->i", delta, delta))
    if len(r) and r.min() < env.softening_min_r:
        raise SingularityError(f"pair distance {r.min():.3g} below {env.softening_min_r}")
    if env.law is Law.INVERSE_R:
        f = state.masses[send, None] * delta / (r**2)[:, None]
    elif env.law is Law.INVERSE_R2:
        f = state.masses[send, None] * delta / (r**3)[:, None]
    else:
        f = env.spring_k * r[:, None] * delta / state.masses[recv, None]
    return recv, send, f


def min_pair_distance(env: EnvConfig, state: SystemState) -> float:
    recv, send = interaction_pairs(env, state.n)
    if len(recv) == 0:
        return np.inf
    delta = state.positions[send] - state.positions[recv]
    return float(np.sqrt(np.einsum("ij,ij->i", delta, delta).min()))


def net_acceleration(env: EnvConfig, state: SystemState) -> np.ndarray:
    recv, _, f = pair_forces(env, state)
    acc = np.zeros_like(state.positions)
    # Fixed-order accumulation keeps results independent of numpy's scatter ordering.
    np.add.at(acc, recv, f)
    return acc + env.g


def step(env: EnvConfig, state: SystemState) -> tuple[SystemState, np.ndarray]:
    """One semi-implicit Euler step; returns the new state and the recorded dv."""
    acc = net_acceleration(env, state)
    dv = acc * env.dt
    dv[state.fixed] = 0.0
    v = state.velocities + dv
    x = state.positions + v * env.dt
    x[state.fixed] = state.positions[state.fixed]
    return SystemState(state.masses.copy(), x, v, state.fixed.copy()), dv


def initial_state(env: EnvConfig, rng: np.random.Generator) -> SystemState:
    n, d = env.n_bodies, env.dim
    masses = np.exp(rng.uniform(np.log(0.5), np.log(2.0), size=n))
    if env.law is Law.SPRING_R2:
        pos = np.zeros((n, d))
        pos[:, 0] = 0.2 * np.arange(n) - 0.1 * (n - 1)
        vel = rng.normal(0.0, 0.1, size=(n, d))
        fixed = np.zeros(n, dtype=bool)
        fixed[[0, -1]] = True
        vel[fixed] = 0.0
        return SystemState(masses, pos, vel, fixed)
    pos = rng.uniform(-1.0, 1.0, size=(n, d))
    vel = rng.normal(0.0, 0.1, size=(n, d))
    return SystemState(masses, pos, vel)


@dataclass
class Record:
    state: SystemState
    dv: np.ndarray
    sim: int = 0
    step: int = 0


@dataclass
class TrajectoryDataset:
    env: EnvConfig
    seed: int
    records: list[Record] = field(default_factory=list)
    n_sims: int = 0
    n_steps: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, records: Iterable[Record]) -> "TrajectoryDataset":
        return TrajectoryDataset(self.env, self.seed, list(records), self.n_sims, self.n_steps)

    def mean_abs_dv(self) -> float:
        if not self.records:
            raise ValueError("empty dataset")
        return float(np.mean(np.concatenate([np.abs(r.dv).ravel() for r in self.records])))

    def save(self, path) -> None:
        path = Path(path)
        lines = [json.dumps(self._meta(), sort_keys=True)]
        for rec in self.records:
            s = rec.state
            obj = {
                "sim": rec.sim,
                "step": rec.step,
                "masses": _floats(s.masses),
                "positions": _floats(s.positions),
                "velocities": _floats(s.velocities),
                "dv": _floats(rec.dv),
                "fixed": [bool(f) for f in s.fixed],
            }
            lines.append(dumps_raw(obj))
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        tmp.replace(path)

    def _meta(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "trajectory_dataset",
            "env": self.env.to_dict(),
            "seed": self.seed,
            "n_sims": self.n_sims,
            "n_steps": self.n_steps,
            "n_records": len(self.records),
        }

    @classmethod
    def load(cls, path) -> "TrajectoryDataset":
        with open(path) as fh:
            header = fh.readline()
            if not header.strip():
                raise ValueError(f"{path}: empty dataset file")
            meta = json.loads(header)
            if meta.get("kind") != "trajectory_dataset":
                raise ValueError(f"{path}: not a trajectory dataset")
            env = EnvConfig.from_dict(meta["env"])
            d = env.dim
            records = []
            for line in fh:
                if not line.strip():
                    continue
                o = json.loads(line)
                n = len(o["masses"])
                state = SystemState(
                    np.array(o["masses"]),
                    np.array(o["positions"]).reshape(n, d),
                    np.array(o["velocities"]).reshape(n, d),
                    np.array(o["fixed"], dtype=bool),
                )
                records.append(Record(state, np.array(o["dv"]).reshape(n, d), o["sim"], o["step"]))
        return cls(env, meta["seed"], records, meta["n_sims"], meta["n_steps"])


class RawJSON(str):
    """Pre-encoded JSON fragment, spliced verbatim by :func:`dumps_raw`."""


def format_floats(a) -> str:
    """JSON array of doubles with 17 significant digits (round-trip exact)."""
    flat = np.asarray(a, dtype=np.float64).ravel()
    return "[" + ", ".join(format(float(x), ".17g") for x in flat) + "]"


def _floats(a) -> RawJSON:
    return RawJSON(format_floats(a))


def dumps_raw(obj: dict) -> str:
    parts = []
    for k, v in obj.items():
        val = v if isinstance(v, RawJSON) else json.dumps(v)
        parts.append(f"{json.dumps(k)}: {val}")
    return "{" + ", ".join(parts) + "}"


def simulate(env: EnvConfig, seed: int, sim_index: int, n_steps: int) -> list[Record]:
    """Run one simulation, resampling initial conditions that start in violation."""
    for attempt in range(MAX_RESAMPLE):
        rng = np.random.default_rng([seed, sim_index, attempt])
        state = initial_state(env, rng)
        records = []
        for t in range(n_steps):
            if min_pair_distance(env, state) < env.softening_min_r:
                break
            new, dv = step(env, state)
            records.append(Record(state, dv, sim_index, t))
            state = new
        if records:
            return records
    raise RuntimeError(f"simulation {sim_index}: no valid initial condition in {MAX_RESAMPLE} draws")


def generate_dataset(env: EnvConfig, n_sims: int, n_steps: int, seed: int) -> TrajectoryDataset:
    if n_sims < 1 or n_steps < 1:
        raise ValueError("n_sims and n_steps must be >= 1")
    records = []
    for i in range(n_sims):
        records.extend(simulate(env, seed, i, n_steps))
    return TrajectoryDataset(env, int(seed), records, n_sims, n_steps)
