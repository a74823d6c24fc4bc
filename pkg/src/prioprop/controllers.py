"""Propagation and weight controllers sharing a first MLP layer.

Both heads read one fixed-width per-node input,

    [ priority block (3) | H^(0) | slot_a | slot_b | slot_s (1) ],

with unused slots zero-filled. The propagation head fills slot_a with the
node's current embedding (its deviation from the running best under the
update strategy) and slot_b with the neighbor aggregate; the weight head
fills slot_a with the final embedding and slot_s with the normalized step.

Probabilities feed the losses differentiably; the thresholded break/update
decisions are discrete and carry no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .backbone import BackboneConfig
from .errors import ConfigError
from .optim import glorot_uniform


@dataclass(frozen=True)
class ControllerConfig:
    hidden: int = 32
    epsilon: float = 0.5        # decision threshold
    lambda1: float = 1.0        # quadratic weight penalty
    lambda2: float = 1.0        # controller loss balance
    priority_input: bool = True  # zero the priority block when off
    step_input: bool = True      # zero the weight head's step slot when off

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError("epsilon must be in (0, 1)")


def controller_input_width(bcfg: BackboneConfig) -> int:
    return 3 + bcfg.initial_dim + 2 * bcfg.embed_dim + 1


def init_controller_params(bcfg: BackboneConfig, ccfg: ControllerConfig,
                           rng: np.random.Generator) -> dict:
    width = controller_input_width(bcfg)
    return {
        "ctrl.shared_w": glorot_uniform(rng, width, ccfg.hidden),
        "ctrl.shared_b": np.zeros((1, ccfg.hidden)),
        "ctrl.prop_w": glorot_uniform(rng, ccfg.hidden, 1),
        "ctrl.prop_b": np.zeros((1, 1)),
        "ctrl.weight_w": glorot_uniform(rng, ccfg.hidden, 1),
        "ctrl.weight_b": np.zeros((1, 1)),
    }


def _assemble(z_std: np.ndarray, h0: np.ndarray, slot_a: np.ndarray,
              slot_b: np.ndarray, slot_s: np.ndarray,
              ccfg: ControllerConfig) -> np.ndarray:
    z = z_std if ccfg.priority_input else np.zeros_like(z_std)
    return np.concatenate([z, h0, slot_a, slot_b, slot_s.reshape(-1, 1)], axis=1)


def _head(tape: Tape, params: dict, inp: np.ndarray, head: str) -> Tensor:
    """sigmoid(head_w . relu(shared_w . input + shared_b) + head_b), in (0,1)."""
    x = tape.constant(inp, name="ctrl.input")
    hidden = tape.relu(tape.add(tape.matmul(x, params["ctrl.shared_w"]),
                                params["ctrl.shared_b"]))
    logit = tape.add(tape.matmul(hidden, params[f"ctrl.{head}_w"]),
                     params[f"ctrl.{head}_b"])
    return tape.sigmoid(logit)


def break_probability(tape: Tape, params: dict, z_std: np.ndarray,
                      h0: np.ndarray, h_k: np.ndarray, h_hat_k: np.ndarray,
                      ccfg: ControllerConfig) -> Tensor:
    """Per-node probability of halting aggregation at this step."""
    inp = _assemble(z_std, h0, h_k, h_hat_k, np.zeros(len(z_std)), ccfg)
    return _head(tape, params, inp, "prop")


def update_probability(tape: Tape, params: dict, z_std: np.ndarray,
                       h0: np.ndarray, h_k: np.ndarray, h_hat_k: np.ndarray,
                       htilde_running: np.ndarray,
                       ccfg: ControllerConfig) -> Tensor:
    """Per-node probability that this step's embedding beats the running
    best; the running best enters as the deviation h_k - htilde."""
    inp = _assemble(z_std, h0, h_k - htilde_running, h_hat_k,
                    np.zeros(len(z_std)), ccfg)
    return _head(tape, params, inp, "prop")


def priority_weight(tape: Tape, params: dict, z_std: np.ndarray,
                    h0: np.ndarray, htilde: np.ndarray, steps: np.ndarray,
                    num_steps: int, ccfg: ControllerConfig) -> Tensor:
    """Per-node priority weight in (0, 1) from the weight head."""
    slot_s = steps.astype(np.float64) / num_steps if ccfg.step_input \
        else np.zeros(len(steps))
    inp = _assemble(z_std, h0, htilde, np.zeros_like(htilde), slot_s, ccfg)
    return _head(tape, params, inp, "weight")


def decide_break_steps(probs: np.ndarray, epsilon: float) -> np.ndarray:
    """First step whose break probability exceeds epsilon; L if none does.

    `probs` has one row per step k = 1..L. Raising epsilon never decreases
    any assigned step.
    """
    probs = np.asarray(probs)
    L = probs.shape[0]
    crossed = probs > epsilon
    any_cross = crossed.any(axis=0)
    first = crossed.argmax(axis=0) + 1
    return np.where(any_cross, first, L).astype(np.int64)


def decide_update_steps(probs: np.ndarray, epsilon: float) -> np.ndarray:
    """Largest step whose update probability exceeds epsilon; 0 if none does
    (the initial embedding is kept)."""
    probs = np.asarray(probs)
    L = probs.shape[0]
    crossed = probs > epsilon
    any_cross = crossed.any(axis=0)
    last = L - 1 - crossed[::-1].argmax(axis=0) + 1
    return np.where(any_cross, last, 0).astype(np.int64)


def normalized_errors(c: np.ndarray) -> np.ndarray:
    """Min-max normalization of prediction errors over the batch.

    A constant batch maps to zeros, which keeps the normalization exactly
    invariant to affine rescaling c -> a*c + b with a > 0.
    """
    c = np.asarray(c, dtype=np.float64)
    span = c.max() - c.min()
    if span == 0.0:
        return np.zeros_like(c)
    return (c - c.min()) / span


def break_loss(tape: Tape, c_train: np.ndarray, p_continue: Tensor) -> Tensor:
    """Mean absolute gap between normalized errors and the probability of
    continuing aggregation at the assigned break step."""
    m = len(c_train)
    if p_continue.shape != (m, 1):
        raise ConfigError(f"expected {m} continue probabilities, got {p_continue.shape}")
    target = tape.constant(normalized_errors(c_train).reshape(-1, 1))
    gap = tape.abs(tape.sub(target, p_continue))
    return tape.scale(tape.sum_all(gap), 1.0 / m)


def update_loss(tape: Tape, probs_train: list[Tensor],
                step_errors: list[np.ndarray],
                best_before: list[np.ndarray]) -> Tensor:
    """Probability-weighted advantage of each step over the running best:
    mean over nodes and steps of p_k * (C_k - C_best_before_k). Negative
    when high-probability steps genuinely improve on the running best."""
    m = probs_train[0].shape[0]
    L = len(probs_train)
    total = None
    for p_k, c_k, c_best in zip(probs_train, step_errors, best_before):
        diff = tape.constant((np.asarray(c_k) - np.asarray(c_best)).reshape(-1, 1))
        term = tape.sum_all(tape.mul(p_k, diff))
        total = term if total is None else tape.add(total, term)
    return tape.scale(total, 1.0 / (m * L))


def weight_objective(tape: Tape, w: Tensor, c_train: np.ndarray,
                     lambda1: float) -> Tensor:
    """Ascent objective for the weight head: mean(w*C) - lambda1 * mean(w^2).

    At an interior optimum with C frozen this drives w_i toward
    C_i / (2 * lambda1)."""
    m = w.shape[0]
    c = tape.constant(np.asarray(c_train, dtype=np.float64).reshape(-1, 1))
    gain = tape.scale(tape.sum_all(tape.mul(w, c)), 1.0 / m)
    penalty = tape.scale(tape.sum_sq(w), lambda1 / m)
    return tape.sub(gain, penalty)


def merged_loss(tape: Tape, loss_prop: Tensor | None, loss_weight: Tensor | None,
                lambda2: float) -> Tensor:
    """Joint controller loss L_p - lambda2 * L_w; minimizing it descends the
    propagation loss while ascending the weight objective."""
    if loss_prop is None and loss_weight is None:
        raise ConfigError("merged_loss needs at least one controller loss")
    if loss_weight is None:
        return loss_prop
    scaled = tape.scale(loss_weight, lambda2)
    if loss_prop is None:
        return tape.scale(scaled, -1.0)
    return tape.sub(loss_prop, scaled)


def break_forward(tape: Tape, params: dict, z_std: np.ndarray,
                  h0: np.ndarray, h_steps: list[np.ndarray],
                  agg_steps: list[np.ndarray],
                  ccfg: ControllerConfig) -> list[Tensor]:
    """Break probabilities for every step, from detached trace values.

    `h_steps[k-1]` and `agg_steps[k-1]` hold the embeddings and neighbor
    aggregates of step k, all with one common width."""
    return [
        break_probability(tape, params, z_std, h0, h_k, a_k, ccfg)
        for h_k, a_k in zip(h_steps, agg_steps)
    ]


def update_scan(tape: Tape, params: dict, z_std: np.ndarray, h0: np.ndarray,
                h_steps: list[np.ndarray], agg_steps: list[np.ndarray],
                step_nll: list[np.ndarray], ccfg: ControllerConfig):
    """Sequential update-strategy pass over a full trace.

    At each step the head scores the current embedding against the running
    best; crossings of epsilon update the per-node best embedding, its step,
    and its error. Errors are compared before the update is applied.

    `step_nll[k]` holds per-node prediction errors computed from H^(k)
    (k = 0..L). Returns (probs, steps, per-step error gaps) where the gaps
    align with the probabilities for the update-strategy loss.
    """
    n = len(z_std)
    L = len(h_steps)
    if h0.shape[1] != h_steps[0].shape[1]:
        raise ConfigError("update strategy needs width-uniform traces "
                          "(H^(0) and H^(k) differ; use the appnp backbone)")
    htilde_run = h0.copy()
    best_err = np.asarray(step_nll[0], dtype=np.float64).copy()
    steps = np.zeros(n, dtype=np.int64)
    probs: list[Tensor] = []
    gaps: list[np.ndarray] = []
    for k in range(1, L + 1):
        p_k = update_probability(tape, params, z_std, h0, h_steps[k - 1],
                                 agg_steps[k - 1], htilde_run, ccfg)
        probs.append(p_k)
        c_k = np.asarray(step_nll[k], dtype=np.float64)
        gaps.append(c_k - best_err)
        crossed = p_k.data[:, 0] > ccfg.epsilon
        if crossed.any():
            htilde_run[crossed] = h_steps[k - 1][crossed]
            best_err[crossed] = c_k[crossed]
            steps[crossed] = k
    return probs, steps, gaps
