"""Bottlenecked interaction network: edge MLP, sum pooling, node MLP."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tape
from .sim import FORMAT_VERSION, EnvConfig, Law, SystemState, format_floats, interaction_pairs


@dataclass(frozen=True)
class ModelConfig:
    dim: int
    message_dim: int
    hidden: int = 128
    layers: int = 3

    def __post_init__(self):
        if self.message_dim < 1:
            raise ValueError("message_dim must be >= 1")
        if self.hidden < 1 or self.layers < 1:
            raise ValueError("hidden width and layer count must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    @property
    def node_dim(self) -> int:
        return 2 * self.dim + 1

    def edge_sizes(self) -> list[int]:
        return [2 * self.node_dim] + [self.hidden] * self.layers + [self.message_dim]

    def node_sizes(self) -> list[int]:
        return [self.node_dim + self.message_dim] + [self.hidden] * self.layers + [self.dim]


@dataclass
class GNParams:
    config: ModelConfig
    edge: list[tuple[np.ndarray, np.ndarray]]
    node: list[tuple[np.ndarray, np.ndarray]]

    def arrays(self) -> list[np.ndarray]:
        """Flat list of parameter arrays in a fixed order (edge W,b..., node W,b...)."""
        return [a for layer in self.edge + self.node for a in layer]

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Sequence[np.ndarray]) -> "GNParams":
        ne = config.layers + 1
        pairs = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(len(arrays) // 2)]
        p = cls(config, pairs[:ne], pairs[ne:])
        p.validate()
        return p

    def copy(self) -> "GNParams":
        return GNParams.from_arrays(self.config, [a.copy() for a in self.arrays()])

    def validate(self) -> None:
        for name, layers, sizes in (
            ("edge", self.edge, self.config.edge_sizes()),
            ("node", self.node, self.config.node_sizes()),
        ):
            if len(layers) != len(sizes) - 1:
                raise ShapeError(f"{name} MLP has {len(layers)} layers, expected {len(sizes) - 1}")
            for (W, b), fan_in, fan_out in zip(layers, sizes[:-1], sizes[1:]):
                if W.shape != (fan_in, fan_out) or b.shape != (1, fan_out):
                    raise ShapeError(f"{name} layer shape W{W.shape} b{b.shape}")
                if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                    raise ValueError(f"{name} MLP has non-finite weights")


def init_params(config: ModelConfig, seed: int) -> GNParams:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)

    def mlp(sizes):
        return [
            (rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)), np.zeros((1, b)))
            for a, b in zip(sizes[:-1], sizes[1:])
        ]

    return GNParams(config, mlp(config.edge_sizes()), mlp(config.node_sizes()))


@dataclass
class Graph:
    """One or more disjoint graphs packed together.

    ``nodes`` rows are [position | velocity | mass].
    """

    nodes: np.ndarray
    receivers: np.ndarray
    senders: np.ndarray
    graph_index: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.graph_index is None:
            self.graph_index = np.zeros(len(self.nodes), dtype=np.intp)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_edges(self) -> int:
        return len(self.receivers)


def node_attributes(state: SystemState) -> np.ndarray:
    return np.hstack([state.positions, state.velocities, state.masses[:, None]])


def build_graph(state: SystemState, env: EnvConfig) -> Graph:
    """Complete directed graph for n-body laws, both chain directions for the string."""
    recv, send = interaction_pairs(env, state.n)
    return Graph(node_attributes(state), recv.astype(np.intp), send.astype(np.intp))


def batch_graphs(graphs: Sequence[Graph]) -> Graph:
    offsets = np.cumsum([0] + [g.n_nodes for g in graphs[:-1]])
    return Graph(
        np.vstack([g.nodes for g in graphs]),
        np.concatenate([g.receivers + o for g, o in zip(graphs, offsets)]).astype(np.intp),
        np.concatenate([g.senders + o for g, o in zip(graphs, offsets)]).astype(np.intp),
        np.concatenate([np.full(g.n_nodes, i) for i, g in enumerate(graphs)]).astype(np.intp),
    )


def permute_graph(graph: Graph, perm: np.ndarray) -> Graph:
    """Relabel node ``perm[i]`` as node ``i``."""
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return Graph(graph.nodes[perm], inv[graph.receivers], inv[graph.senders])


def _mlp(tape: Tape, x: int, layers: list[tuple[int, int]]) -> int:
    for i, (w, b) in enumerate(layers):
        x = tape.affine(x, w, b)
        if i < len(layers) - 1:
            x = tape.relu(x)
    return x


@dataclass
class ForwardPass:
    tape: Tape
    param_handles: list[int]
    dv: int
    messages: int
    pooled: int


def trace_forward(params: GNParams, graph: Graph) -> ForwardPass:
    """Run the network on ``graph`` while recording a tape for backprop."""
    cfg = params.config
    if graph.nodes.shape[1] != cfg.node_dim:
        raise ShapeError(f"node attributes have {graph.nodes.shape[1]} columns, model expects {cfg.node_dim}")
    tape = Tape()
    handles = [tape.leaf(a) for a in params.arrays()]
    ne = cfg.layers + 1
    pairs = [(handles[2 * i], handles[2 * i + 1]) for i in range(len(handles) // 2)]
    edge_in = tape.leaf(
        np.hstack([graph.nodes[graph.receivers], graph.nodes[graph.senders]])
        if graph.n_edges
        else np.zeros((0, 2 * cfg.node_dim))
    )
    msgs = _mlp(tape, edge_in, pairs[:ne])
    pooled = tape.scatter_sum(msgs, graph.receivers, graph.n_nodes)
    node_in = tape.concat(tape.leaf(graph.nodes), pooled)
    dv = _mlp(tape, node_in, pairs[ne:])
    return ForwardPass(tape, handles, dv, msgs, pooled)


def forward(params: GNParams, graph: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Predicted velocity updates (n_nodes x D) and edge messages (n_edges x L)."""
    fp = trace_forward(params, graph)
    return fp.tape.value(fp.dv), fp.tape.value(fp.messages)


def message_forward(params: GNParams, receiver_attrs, sender_attrs) -> np.ndarray:
    """Message(s) for receiver/sender attribute rows; accepts single rows or batches."""
    r = np.atleast_2d(np.asarray(receiver_attrs, dtype=np.float64))
    s = np.atleast_2d(np.asarray(sender_attrs, dtype=np.float64))
    cfg = params.config
    if r.shape != s.shape or r.shape[1] != cfg.node_dim:
        raise ShapeError(f"expected node attribute rows of width {cfg.node_dim}")
    x = np.hstack([r, s])
    for i, (W, b) in enumerate(params.edge):
        x = x @ W + b
        if i < len(params.edge) - 1:
            x = np.maximum(x, 0.0)
    return x[0] if np.ndim(receiver_attrs) == 1 else x


def loss_and_grads(params: GNParams, graph: Graph, target: np.ndarray) -> tuple[float, list[np.ndarray]]:
    fp = trace_forward(params, graph)
    loss = fp.tape.l1_loss(fp.dv, target)
    grads = fp.tape.backward(loss)
    return float(fp.tape.value(loss)[0, 0]), [grads[h] for h in fp.param_handles]


def save_checkpoint(path, params: GNParams, *, seed: int, steps: int, extra: dict | None = None) -> None:
    """Write params as JSON with 17-significant-digit weights.

    The file is written to a temporary sibling and renamed, so a failure
    never leaves a partial checkpoint behind.
    """
    path = Path(path)
    cfg = params.config

    def layers(mlp):
        return ", ".join(
            '{"W_shape": %s, "W": %s, "b": %s}' % (json.dumps(list(W.shape)), format_floats(W), format_floats(b))
            for W, b in mlp
        )

    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "gn_checkpoint",
        "config": {"dim": cfg.dim, "message_dim": cfg.message_dim, "hidden": cfg.hidden, "layers": cfg.layers},
        "seed": seed,
        "steps": steps,
    }
    if extra:
        meta["extra"] = extra
    head = json.dumps(meta, sort_keys=True)[:-1]
    text = head + ', "edge": [' + layers(params.edge) + '], "node": [' + layers(params.node) + "]}\n"
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text)
        tmp.replace(path)
    finally:
        if tmp.exists():
            tmp.unlink()


def load_checkpoint(path) -> tuple[GNParams, dict]:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupt checkpoint ({exc})") from None
    if not isinstance(obj, dict) or obj.get("kind") != "gn_checkpoint":
        raise ValueError(f"{path}: not a graph-network checkpoint")
    cfg = ModelConfig(**obj["config"])

    def layers(items):
        out = []
        for item in items:
            W = np.array(item["W"], dtype=np.float64).reshape(item["W_shape"])
            out.append((W, np.array(item["b"], dtype=np.float64).reshape(1, -1)))
        return out

    params = GNParams(cfg, layers(obj["edge"]), layers(obj["node"]))
    params.validate()
    meta = {k: obj[k] for k in ("seed", "steps", "format_version") if k in obj}
    meta.update(obj.get("extra", {}))
    return params, meta


def check_env_matches(config: ModelConfig, env: EnvConfig) -> None:
    if config.dim != env.dim:
        raise ShapeError(f"model is {config.dim}D but the environment is {env.dim}D")


__all__ = [
    "ModelConfig",
    "GNParams",
    "Graph",
    "Law",
    "init_params",
    "build_graph",
    "batch_graphs",
    "forward",
    "message_forward",
    "trace_forward",
    "loss_and_grads",
    "save_checkpoint",
    "load_checkpoint",
]
