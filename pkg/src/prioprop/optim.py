"""Adam with decoupled weight decay, finite-difference gradient checking,
and the flat binary checkpoint format for named parameter sets."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, backward
from .errors import InputError, ShapeError

CHECKPOINT_MAGIC = b"PPCK"
CHECKPOINT_VERSION = 1


@dataclass
class AdamState:
    """Per-parameter moments plus shared hyperparameters and step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update, in place on `params`.

    Weight decay is decoupled: applied directly to the parameters, never
    folded into the gradient moments.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.m[name] = m
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    per_param: dict


def grad_check(build_loss, params: dict, step: float = 1e-4, tol: float = 1e-3) -> GradCheckResult:
    """Compare analytic gradients against central finite differences.

    `build_loss(tape, leaves)` must deterministically construct a scalar loss
    from a dict of leaf tensors (dropout disabled or re-seeded per call).
    Error per parameter is ||ga - gn|| / max(||ga|| + ||gn||, 1e-6).
    """
    tape = Tape()
    leaves = {k: tape.leaf(v.copy(), name=k) for k, v in params.items()}
    root = build_loss(tape, leaves)
    backward(tape, root)
    analytic = {k: leaves[k].grad.copy() for k in params}

    def eval_loss(trial):
        t = Tape()
        lv = {k: t.leaf(v, requires_grad=False, name=k) for k, v in trial.items()}
        return build_loss(t, lv).item()

    per_param = {}
    worst = 0.0
    for name, base in params.items():
        numeric = np.zeros_like(base)
        for pos in np.ndindex(base.shape):
            trial = {k: (v.copy() if k == name else v) for k, v in params.items()}
            trial[name][pos] = base[pos] + step
            up = eval_loss(trial)
            trial[name][pos] = base[pos] - step
            down = eval_loss(trial)
            numeric[pos] = (up - down) / (2.0 * step)
        diff = np.linalg.norm(analytic[name] - numeric)
        denom = max(np.linalg.norm(analytic[name]) + np.linalg.norm(numeric), 1e-6)
        err = diff / denom
        per_param[name] = err
        worst = max(worst, err)
    return GradCheckResult(passed=worst < tol, max_rel_error=worst, per_param=per_param)


def save_checkpoint(params: dict, path) -> None:
    """Write named parameters: magic, version, count, then per parameter
    name length + name + shape + 32-bit little-endian entries."""
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, arr in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint back as float64 arrays keyed by name."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise InputError("not a checkpoint file (bad magic)", path=path)
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise InputError(f"unsupported checkpoint version {version}", path=path)
    params = {}
    offset = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        rows, cols = struct.unpack_from("<II", blob, offset)
        offset += 8
        flat = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=offset)
        offset += 4 * rows * cols
        params[name] = flat.reshape(rows, cols).astype(np.float64)
    return params


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Fan-based uniform init, U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols))
