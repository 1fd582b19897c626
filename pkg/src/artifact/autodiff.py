"""A tiny reverse-mode tape over dense float64 matrices.

Only the handful of ops the graph network needs are supported: affine layers,
ReLU, receiver-indexed sum pooling, column concatenation, elementwise add and
the mean-absolute-error loss.  Values are plain 2D numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class OpRecord:
    kind: str
    inputs: tuple[int, ...]
    output: int
    saved: Any = None


def _as2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2D array, got shape {a.shape}")
    return a


class Tape:
    """Records ops in execution order so :meth:`backward` can walk them in reverse.

    Every op returns an integer handle; ``tape.value(h)`` gives the array.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.records: list[OpRecord] = []

    def _push(self, value: np.ndarray) -> int:
        self.values.append(value)
        return len(self.values) - 1

    def value(self, h: int) -> np.ndarray:
        return self.values[h]

    def leaf(self, array) -> int:
        return self._push(_as2d(array))

    def affine(self, x: int, w: int, b: int) -> int:
        X, W, B = self.values[x], self.values[w], self.values[b]
        if X.shape[1] != W.shape[0] or B.shape != (1, W.shape[1]):
            raise ShapeError(f"affine: X{X.shape} W{W.shape} b{B.shape}")
        out = self._push(X @ W + B)
        self.records.append(OpRecord("affine", (x, w, b), out))
        return out

    def relu(self, x: int) -> int:
        X = self.values[x]
        mask = X > 0
        out = self._push(np.where(mask, X, 0.0))
        self.records.append(OpRecord("relu", (x,), out, mask))
        return out

    def add(self, a: int, b: int) -> int:
        A, B = self.values[a], self.values[b]
        if A.shape != B.shape:
            raise ShapeError(f"add: {A.shape} vs {B.shape}")
        out = self._push(A + B)
        self.records.append(OpRecord("add", (a, b), out))
        return out

    def concat(self, a: int, b: int) -> int:
        A, B = self.values[a], self.values[b]
        if A.shape[0] != B.shape[0]:
            raise ShapeError(f"concat: {A.shape} vs {B.shape}")
        out = self._push(np.hstack([A, B]))
        self.records.append(OpRecord("concat", (a, b), out, A.shape[1]))
        return out

    def scatter_sum(self, m: int, receiver_ids, n_nodes: int) -> int:
        M = self.values[m]
        ids = np.asarray(receiver_ids, dtype=np.intp)
        if ids.shape != (M.shape[0],):
            raise ShapeError(f"scatter_sum: {M.shape[0]} messages but {ids.size} receiver ids")
        out = self._push(scatter_sum(M, ids, n_nodes))
        self.records.append(OpRecord("scatter_sum", (m,), out, ids))
        return out

    def l1_loss(self, pred: int, target) -> int:
        P = self.values[pred]
        T = _as2d(target)
        if P.shape != T.shape:
            raise ShapeError(f"l1_loss: {P.shape} vs {T.shape}")
        diff = P - T
        out = self._push(np.array([[np.abs(diff).mean()]]))
        self.records.append(OpRecord("l1", (pred,), out, np.sign(diff) / diff.size))
        return out

    def backward(self, out: int, seed=None) -> list[np.ndarray | None]:
        """Gradients of ``out`` with respect to every handle (None where unreached)."""
        grads: list[np.ndarray | None] = [None] * len(self.values)
        grads[out] = np.ones_like(self.values[out]) if seed is None else _as2d(seed)
        for rec in reversed(self.records):
            g = grads[rec.output]
            if g is None:
                continue
            for h, gi in zip(rec.inputs, _BACKWARD[rec.kind](self, rec, g)):
                if gi is None:
                    continue
                grads[h] = gi if grads[h] is None else grads[h] + gi
        return grads


def _bw_affine(tape, rec, g):
    x, w, _ = rec.inputs
    X, W = tape.values[x], tape.values[w]
    return g @ W.T, X.T @ g, g.sum(axis=0, keepdims=True)


def _bw_relu(tape, rec, g):
    return (np.where(rec.saved, g, 0.0),)


def _bw_add(tape, rec, g):
    return g, g


def _bw_concat(tape, rec, g):
    k = rec.saved
    return g[:, :k], g[:, k:]


def _bw_scatter(tape, rec, g):
    return (g[rec.saved],)


def _bw_l1(tape, rec, g):
    return (rec.saved * g[0, 0],)


_BACKWARD = {
    "affine": _bw_affine,
    "relu": _bw_relu,
    "add": _bw_add,
    "concat": _bw_concat,
    "scatter_sum": _bw_scatter,
    "l1": _bw_l1,
}


def scatter_sum(messages: np.ndarray, receiver_ids, n_nodes: int) -> np.ndarray:
    """Sum message rows into their receiver's row; receivers without messages get zeros."""
    M = _as2d(messages) if np.size(messages) else np.zeros((0, np.shape(messages)[-1]))
    ids = np.asarray(receiver_ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= n_nodes):
        raise IndexError(f"receiver id out of range [0, {n_nodes})")
    if ids.shape != (M.shape[0],):
        raise ShapeError("one receiver id per message row is required")
    out = np.zeros((n_nodes, M.shape[1]))
    np.add.at(out, ids, M)
    return out
