"""Reverse-mode automatic differentiation over dense 2-D float64 matrices.

A Tape records exactly one entry per forward op, in execution order; backward
replays the entries in exact reverse order and accumulates gradients into the
leaves that were created with requires_grad=True. Graph-structured inputs
(the normalized adjacency) enter only as constants of spmm_const, so nothing
is ever differentiated through the graph itself.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError, ShapeError
from .graph import NormalizedAdjacency, spmm


class Tensor:
    """A 2-D float64 matrix with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_track", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._track = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a scalar tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        tag = self.name or ("leaf" if self.requires_grad else "const")
        return f"Tensor({tag}, shape={self.data.shape})"


class _Record:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered op log; inputs are always recorded before their consumers."""

    def __init__(self):
        self._records: list[_Record] = []
        self._leaves: list[Tensor] = []

    def leaf(self, data, requires_grad=True, name=None) -> Tensor:
        t = Tensor(data, requires_grad=requires_grad, name=name)
        if requires_grad:
            self._leaves.append(t)
        return t

    def constant(self, data, name=None) -> Tensor:
        """Wrap values with no gradient path (also serves as stop-gradient)."""
        return Tensor(data, requires_grad=False, name=name)

    def record(self, op: str, out_data: np.ndarray, inputs, backward_rule) -> Tensor:
        """Append one op record. `backward_rule(grad_out)` must return one
        gradient array per input (None for inputs that take no gradient)."""
        if not np.all(np.isfinite(out_data)):
            raise NumericalError(f"non-finite output from op '{op}'")
        out = Tensor(out_data)
        out._track = any(t._track for t in inputs)
        self._records.append(_Record(op, out, tuple(inputs), backward_rule))
        return out

    # -- forward ops ------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul mismatch: {a.shape} x {b.shape}")
        ad, bd = a.data, b.data

        def back(g):
            return g @ bd.T, ad.T @ g

        return self.record("matmul", ad @ bd, (a, b), back)

    def spmm_const(self, adj: NormalizedAdjacency, t: Tensor) -> Tensor:
        """Multiply by the (constant, symmetric) normalized adjacency."""

        def back(g):
            return (spmm(adj, g),)  # symmetric weights, so A^T = A

        return self.record("spmm_const", spmm(adj, t.data), (t,), back)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_broadcast("add", a, b)
        bias = b.shape[0] == 1 and a.shape[0] != 1

        def back(g):
            return g, g.sum(axis=0, keepdims=True) if bias else g

        return self.record("add", a.data + b.data, (a, b), back)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_broadcast("sub", a, b)
        bias = b.shape[0] == 1 and a.shape[0] != 1

        def back(g):
            return g, -g.sum(axis=0, keepdims=True) if bias else -g

        return self.record("sub", a.data - b.data, (a, b), back)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise product, same shape only."""
        if a.shape != b.shape:
            raise ShapeError(f"mul mismatch: {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data

        def back(g):
            return g * bd, g * ad

        return self.record("mul", ad * bd, (a, b), back)

    def scale(self, t: Tensor, c: float) -> Tensor:
        c = float(c)

        def back(g):
            return (g * c,)

        return self.record("scale", t.data * c, (t,), back)

    def concat_cols(self, *tensors: Tensor) -> Tensor:
        rows = tensors[0].shape[0]
        if any(t.shape[0] != rows for t in tensors):
            raise ShapeError("concat_cols needs equal row counts")
        widths = [t.shape[1] for t in tensors]
        splits = np.cumsum(widths)[:-1]

        def back(g):
            return tuple(np.split(g, splits, axis=1))

        out = np.concatenate([t.data for t in tensors], axis=1)
        return self.record("concat_cols", out, tensors, back)

    def relu(self, t: Tensor) -> Tensor:
        mask = t.data > 0

        def back(g):
            return (g * mask,)

        return self.record("relu", np.where(mask, t.data, 0.0), (t,), back)

    def sigmoid(self, t: Tensor) -> Tensor:
        x = t.data
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def back(g):
            return (g * s * (1.0 - s),)

        return self.record("sigmoid", s, (t,), back)

    def row_softmax(self, t: Tensor) -> Tensor:
        shifted = t.data - t.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        s = e / e.sum(axis=1, keepdims=True)

        def back(g):
            return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

        return self.record("row_softmax", s, (t,), back)

    def abs(self, t: Tensor) -> Tensor:
        sign = np.sign(t.data)

        def back(g):
            return (g * sign,)

        return self.record("abs", np.abs(t.data), (t,), back)

    def dropout(self, t: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
        """Inverted dropout: scale kept entries by 1/(1-rate) at train time."""
        if not 0.0 <= rate < 1.0:
            raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
        keep = (rng.random(t.shape) >= rate) / (1.0 - rate)

        def back(g):
            return (g * keep,)

        return self.record("dropout", t.data * keep, (t,), back)

    def sum_all(self, t: Tensor) -> Tensor:
        shape = t.shape

        def back(g):
            return (np.full(shape, g[0, 0]),)

        return self.record("sum_all", np.array([[t.data.sum()]]), (t,), back)

    def sum_sq(self, t: Tensor) -> Tensor:
        td = t.data

        def back(g):
            return (2.0 * g[0, 0] * td,)

        return self.record("sum_sq", np.array([[np.sum(td * td)]]), (t,), back)

    def gather_rows(self, t: Tensor, idx: np.ndarray) -> Tensor:
        idx = np.asarray(idx, dtype=np.int64)
        rows, cols = t.shape

        def back(g):
            out = np.zeros((rows, cols))
            np.add.at(out, idx, g)
            return (out,)

        return self.record("gather_rows", t.data[idx], (t,), back)

    def select_rows(self, tensors: list[Tensor], steps: np.ndarray) -> Tensor:
        """Per-row selection across a stack: out[i] = tensors[steps[i]][i]."""
        steps = np.asarray(steps, dtype=np.int64)
        n, h = tensors[0].shape
        if any(t.shape != (n, h) for t in tensors):
            raise ShapeError("select_rows needs uniformly shaped tensors")
        if steps.shape != (n,) or steps.min() < 0 or steps.max() >= len(tensors):
            raise ShapeError("select_rows steps out of range")
        out = np.empty((n, h))
        masks = []
        for k, t in enumerate(tensors):
            m = steps == k
            masks.append(m)
            out[m] = t.data[m]

        def back(g):
            return tuple(g * m[:, None] for m in masks)

        return self.record("select_rows", out, tuple(tensors), back)

    def masked_nll(self, logits: Tensor, labels: np.ndarray, mask,
                   weights: np.ndarray | None = None) -> Tensor:
        """Weighted mean negative log-likelihood over the masked nodes.

        `weights` (length m, aligned with the sorted mask indices) enter as
        constants; the mean divides by m regardless of the weight values.
        """
        idx = _mask_to_indices(mask, logits.shape[0])
        m = len(idx)
        if m == 0:
            raise ShapeError("masked_nll over an empty mask")
        y = np.asarray(labels, dtype=np.int64)[idx]
        w = np.ones(m) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (m,):
            raise ShapeError(f"weights must have length {m}, got {w.shape}")
        x = logits.data[idx]
        shifted = x - x.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = -(w * logp[np.arange(m), y]).sum() / m
        probs = np.exp(logp)

        def back(g):
            d = probs.copy()
            d[np.arange(m), y] -= 1.0
            d *= (g[0, 0] / m) * w[:, None]
            full = np.zeros(logits.shape)
            full[idx] = d
            return (full,)

        return self.record("masked_nll", np.array([[loss]]), (logits,), back)

    # -- helpers ----------------------------------------------------------

    @staticmethod
    def _check_broadcast(op, a, b):
        if a.shape == b.shape:
            return
        if b.shape == (1, a.shape[1]):
            return  # row-vector bias broadcast
        raise ShapeError(f"{op} mismatch: {a.shape} vs {b.shape}")


def backward(tape: Tape, root: Tensor) -> None:
    """Populate .grad on every leaf reachable from root; others get zero."""
    if root.shape != (1, 1):
        raise ShapeError(f"backward root must be scalar, got {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    for rec in reversed(tape._records):
        g = grads.pop(id(rec.out), None)
        if g is None or not rec.out._track:
            continue
        in_grads = rec.backward(g)
        for t, ig in zip(rec.inputs, in_grads):
            if ig is None or not t._track:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = ig if acc is None else acc + ig
    for leaf in tape._leaves:
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else g


def nll_per_node(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Plain numpy cross-entropy per row, used for detached error values."""
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -logp[np.arange(x.shape[0]), np.asarray(labels, dtype=np.int64)]


def _mask_to_indices(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (n,):
            raise ShapeError(f"boolean mask must have length {n}")
        return np.nonzero(mask)[0]
    return mask.astype(np.int64)
