"""Backbone GNN forward passes producing per-step propagation traces.

Two kinds are supported. The appnp backbone encodes features straight to
logit space with a two-layer MLP and then mixes neighbor aggregates with the
initial embedding at every step. The gcn backbone propagates in hidden space
with per-step weight matrices and a final linear head.

A break mask freezes a node's own row once its step bound is reached; the
frozen row still feeds its neighbors' aggregation in later steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ConfigError
from .graph import NormalizedAdjacency
from .optim import glorot_uniform

APPNP = "appnp"
GCN = "gcn"


@dataclass(frozen=True)
class BackboneConfig:
    kind: str
    in_dim: int
    num_classes: int
    num_steps: int = 8          # L
    hidden: int = 64
    alpha: float = 0.1          # teleport weight, appnp only
    dropout: float = 0.0

    def __post_init__(self):
        if self.kind not in (APPNP, GCN):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")

    @property
    def embed_dim(self) -> int:
        """Width of the propagated matrices H^(1..L)."""
        return self.num_classes if self.kind == APPNP else self.hidden

    @property
    def initial_dim(self) -> int:
        """Width of H^(0) (equals embed_dim for appnp, in_dim for gcn)."""
        return self.num_classes if self.kind == APPNP else self.in_dim


@dataclass
class PropagationTrace:
    """Per-step embeddings H^(0..L), neighbor aggregates, and the per-node
    final embedding with its assigned step."""

    H: list[Tensor]
    H_hat: list[Tensor]
    htilde: Tensor
    steps: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.H) - 1


def init_backbone_params(config: BackboneConfig, rng: np.random.Generator) -> dict:
    """Glorot-uniform weights, zero biases, in a fixed key order."""
    p = {}
    if config.kind == APPNP:
        p["enc.w1"] = glorot_uniform(rng, config.in_dim, config.hidden)
        p["enc.b1"] = np.zeros((1, config.hidden))
        p["enc.w2"] = glorot_uniform(rng, config.hidden, config.num_classes)
        p["enc.b2"] = np.zeros((1, config.num_classes))
    else:
        for k in range(1, config.num_steps + 1):
            fan_in = config.in_dim if k == 1 else config.hidden
            p[f"conv.w{k}"] = glorot_uniform(rng, fan_in, config.hidden)
        p["head.w"] = glorot_uniform(rng, config.hidden, config.num_classes)
        p["head.b"] = np.zeros((1, config.num_classes))
    return p


def encode(tape: Tape, x: Tensor, params: dict, config: BackboneConfig,
           dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Initial embedding H^(0): MLP into logit space for appnp, raw features
    for gcn. Dropout is applied only when a generator is passed (train mode)."""
    if config.kind == GCN:
        return x
    h = x
    if dropout_rng is not None:
        h = tape.dropout(h, config.dropout, dropout_rng)
    h = tape.add(tape.matmul(h, params["enc.w1"]), params["enc.b1"])
    h = tape.relu(h)
    if dropout_rng is not None:
        h = tape.dropout(h, config.dropout, dropout_rng)
    return tape.add(tape.matmul(h, params["enc.w2"]), params["enc.b2"])


def propagate_step(tape: Tape, adj: NormalizedAdjacency, h_prev: Tensor,
                   h0: Tensor, params: dict, config: BackboneConfig,
                   k: int) -> tuple[Tensor, Tensor]:
    """One aggregation plus update: returns (neighbor aggregate, new state)."""
    h_hat = tape.spmm_const(adj, h_prev)
    if config.kind == APPNP:
        h_new = tape.add(tape.scale(h_hat, 1.0 - config.alpha),
                         tape.scale(h0, config.alpha))
    else:
        h_new = tape.matmul(h_hat, params[f"conv.w{k}"])
        if k < config.num_steps:
            h_new = tape.relu(h_new)
    return h_hat, h_new


def run(tape: Tape, adj: NormalizedAdjacency, x: Tensor, params: dict,
        config: BackboneConfig, dropout_rng: np.random.Generator | None = None,
        break_mask: np.ndarray | None = None) -> PropagationTrace:
    """Full propagation trace over L steps.

    With a break mask, node i's row is frozen at H^(l_i) for later steps
    while still transmitting its frozen value to neighbors; without one,
    every node runs all L steps and htilde is H^(L).
    """
    L = config.num_steps
    if break_mask is not None:
        break_mask = np.asarray(break_mask, dtype=np.int64)
        if break_mask.min() < 0 or break_mask.max() > L:
            raise ConfigError(f"break mask entries must lie in [0, {L}]")
        if config.kind == GCN and break_mask.min() < 1:
            raise ConfigError("gcn rows at step 0 have feature width; "
                              "break steps must be >= 1")
    h0 = encode(tape, x, params, config, dropout_rng)
    H = [h0]
    H_hat = []
    for k in range(1, L + 1):
        h_hat, h_new = propagate_step(tape, adj, H[-1], h0, params, config, k)
        if break_mask is not None and (break_mask < k).any():
            still_active = (break_mask >= k).astype(np.int64)
            h_new = tape.select_rows([H[-1], h_new], still_active)
        H.append(h_new)
        H_hat.append(h_hat)
    steps = np.full(adj.n, L, dtype=np.int64) if break_mask is None else break_mask
    return PropagationTrace(H=H, H_hat=H_hat, htilde=H[-1], steps=steps)


def project_logits(tape: Tape, htilde: Tensor, params: dict,
                   config: BackboneConfig) -> Tensor:
    """Class logits from final embeddings (linear head for gcn)."""
    if config.kind == APPNP:
        return htilde
    return tape.add(tape.matmul(htilde, params["head.w"]), params["head.b"])


def predict(tape: Tape, htilde: Tensor, params: dict,
            config: BackboneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Row-softmax probabilities and argmax labels."""
    logits = project_logits(tape, htilde, params, config)
    probs = tape.row_softmax(logits).data
    return probs, probs.argmax(axis=1)
