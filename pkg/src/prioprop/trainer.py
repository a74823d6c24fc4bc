"""Alternating optimization of the backbone and the two controllers.

Each epoch runs two phases. Phase one does a full forward pass, reads the
current priority weights as constants, and descends the weighted supervised
loss in the backbone parameters. Phase two re-runs the forward pass with the
updated backbone, treats all prediction errors as constants, and descends the
merged controller loss (which ascends the weight objective) in the shared
and head parameters.

Depth decisions are made on the full trace during training; truncated
(masked) propagation is applied at evaluation time only.
"""

from __future__ import annotations

import csv
import io
import itertools
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import controllers as ctrl
from .autodiff import Tape, backward, nll_per_node
from .backbone import (APPNP, GCN, BackboneConfig, init_backbone_params,
                       project_logits, run)
from .controllers import ControllerConfig, init_controller_params
from .errors import ConfigError, ShapeError
from .graph import normalize
from .optim import AdamState, adam_step
from .priority import build_priority

BREAK = "break"
UPDATE = "update"


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = BREAK
    backbone: str = APPNP
    num_steps: int = 8
    hidden: int = 64
    alpha: float = 0.1
    dropout: float = 0.5
    controller_hidden: int = 32
    epsilon: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 1.0
    lr_backbone: float = 0.01
    lr_controller: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 200
    patience: int = 100
    seed: int = 0
    weight_controller: bool = True
    propagation_controller: bool = True
    priority_input: bool = True
    step_input: bool = True

    def __post_init__(self):
        if self.strategy not in (BREAK, UPDATE):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.backbone not in (APPNP, GCN):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.strategy == UPDATE and self.backbone == GCN \
                and self.propagation_controller:
            raise ConfigError(
                "the update strategy needs width-uniform traces; the gcn "
                "backbone keeps raw features at step 0 (use appnp)")
        if self.epochs < 0 or self.patience < 1:
            raise ConfigError("epochs must be >= 0 and patience >= 1")


@dataclass
class EpochStats:
    epoch: int
    loss_supervised: float
    loss_propagation: float
    loss_weight: float
    train_accuracy: float
    val_accuracy: float


@dataclass
class TrainReport:
    seed: int
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = 0.0
    test_accuracy: float = 0.0
    weights: np.ndarray | None = None   # final per-node priority weights
    steps: np.ndarray | None = None     # final per-node propagation steps
    wall_clock: float = 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "loss_supervised", "loss_propagation",
                         "loss_weight", "train_accuracy", "val_accuracy"])
        for s in self.epochs:
            writer.writerow([s.epoch, repr(s.loss_supervised),
                             repr(s.loss_propagation), repr(s.loss_weight),
                             repr(s.train_accuracy), repr(s.val_accuracy)])
        return buf.getvalue()

    def summary_text(self) -> str:
        lines = [
            f"seed = {self.seed}",
            f"epochs_run = {len(self.epochs)}",
            f"best_epoch = {self.best_epoch}",
            f"best_val_accuracy = {self.best_val_accuracy!r}",
            f"test_accuracy = {self.test_accuracy!r}",
        ]
        return "\n".join(lines) + "\n"


@dataclass
class _Forward:
    tape: Tape
    leaves: dict
    trace: object
    probs: list | None
    steps: np.ndarray
    htilde: object
    logits: object
    nll_all: np.ndarray
    scan_errors: tuple | None = None  # (step_errors, best_before) for update


class Trainer:
    """Owns one model's parameters, optimizer state, and RNG streams."""

    def __init__(self, config: TrainConfig, dataset):
        self.cfg = config
        self.data = dataset
        n, d = dataset.features.shape
        self.bcfg = BackboneConfig(
            kind=config.backbone, in_dim=d, num_classes=dataset.labels.num_classes,
            num_steps=config.num_steps, hidden=config.hidden,
            alpha=config.alpha, dropout=config.dropout)
        self.ccfg = ControllerConfig(
            hidden=config.controller_hidden, epsilon=config.epsilon,
            lambda1=config.lambda1, lambda2=config.lambda2,
            priority_input=config.priority_input, step_input=config.step_input)
        self.adj = normalize(dataset.graph)
        self.z = build_priority(dataset.graph, dataset.features).standardized
        self.x = np.asarray(dataset.features, dtype=np.float64)
        self.y = dataset.labels.y
        self.train_idx = np.nonzero(dataset.masks.train)[0]
        self.val_idx = np.nonzero(dataset.masks.val)[0]
        self.test_idx = np.nonzero(dataset.masks.test)[0]
        init_seq, drop_seq = np.random.SeedSequence(config.seed).spawn(2)
        init_rng = np.random.default_rng(init_seq)
        self.params = init_backbone_params(self.bcfg, init_rng)
        self._theta_names = list(self.params)
        self._phi_names = []
        if self._use_prop or self._use_weight:
            ctrl_params = init_controller_params(self.bcfg, self.ccfg, init_rng)
            self.params.update(ctrl_params)
            self._phi_names = list(ctrl_params)
        self.dropout_rng = np.random.default_rng(drop_seq)
        self.opt_theta = AdamState(lr=config.lr_backbone,
                                   weight_decay=config.weight_decay)
        self.opt_phi = AdamState(lr=config.lr_controller)

    @property
    def _use_prop(self) -> bool:
        return self.cfg.propagation_controller

    @property
    def _use_weight(self) -> bool:
        return self.cfg.weight_controller

    # -- forward ----------------------------------------------------------

    def _step_logits(self, h_data: np.ndarray, params: dict) -> np.ndarray:
        if self.bcfg.kind == APPNP:
            return h_data
        return h_data @ params["head.w"] + params["head.b"]

    def _controller_views(self, trace, params: dict):
        """Per-step (embedding, aggregate) value pairs at one common width.

        The gcn backbone's raw aggregate at step 1 still has feature width,
        so its controller view is the transformed aggregate H_hat(k) W_k,
        the pre-activation of H(k)."""
        h_steps = [h.data for h in trace.H[1:]]
        if self.bcfg.kind == APPNP:
            agg_steps = [h.data for h in trace.H_hat]
        else:
            agg_steps = [trace.H_hat[k - 1].data @ params[f"conv.w{k}"]
                         for k in range(1, self.bcfg.num_steps + 1)]
        return h_steps, agg_steps

    def _forward(self, params: dict | None = None, train: bool = False) -> _Forward:
        params = self.params if params is None else params
        tape = Tape()
        leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
        x = tape.constant(self.x, name="features")
        rng = self.dropout_rng if train else None
        trace = run(tape, self.adj, x, leaves, self.bcfg, dropout_rng=rng)
        probs = None
        scan_errors = None
        if self._use_prop and self.cfg.strategy == BREAK:
            h_steps, agg_steps = self._controller_views(trace, params)
            probs = ctrl.break_forward(tape, leaves, self.z, trace.H[0].data,
                                       h_steps, agg_steps, self.ccfg)
            pvals = np.stack([p.data[:, 0] for p in probs])
            steps = ctrl.decide_break_steps(pvals, self.ccfg.epsilon)
            htilde = tape.select_rows(trace.H[1:], steps - 1)
        elif self._use_prop and self.cfg.strategy == UPDATE:
            h_steps, agg_steps = self._controller_views(trace, params)
            step_nll = [nll_per_node(self._step_logits(h.data, params), self.y)
                        for h in trace.H]
            probs, steps, gaps = ctrl.update_scan(tape, leaves, self.z,
                                                  trace.H[0].data, h_steps,
                                                  agg_steps, step_nll, self.ccfg)
            best_before = [c - g for c, g in zip(step_nll[1:], gaps)]
            scan_errors = (step_nll[1:], best_before)
            htilde = tape.select_rows(trace.H, steps)
        else:
            steps = trace.steps
            htilde = trace.htilde
        logits = project_logits(tape, htilde, leaves, self.bcfg)
        nll_all = nll_per_node(logits.data, self.y)
        return _Forward(tape=tape, leaves=leaves, trace=trace, probs=probs,
                        steps=steps, htilde=htilde, logits=logits,
                        nll_all=nll_all, scan_errors=scan_errors)

    def _priority_weights(self, fw: _Forward) -> object:
        """Weight-head output tensor for all nodes (detached trace inputs)."""
        return ctrl.priority_weight(
            fw.tape, fw.leaves, self.z, fw.trace.H[0].data, fw.htilde.data,
            fw.steps, self.bcfg.num_steps, self.ccfg)

    # -- training ---------------------------------------------------------

    def train_epoch(self) -> EpochStats:
        cfg = self.cfg
        m = len(self.train_idx)

        # Phase one: descend the (re)weighted supervised loss in theta,
        # with the priority weights read off as constants.
        fw = self._forward(train=True)
        if self._use_weight:
            w_train = self._priority_weights(fw).data[self.train_idx, 0]
        else:
            w_train = np.ones(m)
        loss_sup = fw.tape.masked_nll(fw.logits, self.y, self.train_idx,
                                      weights=w_train)
        backward(fw.tape, loss_sup)
        theta_grads = {k: fw.leaves[k].grad for k in self._theta_names}
        adam_step(self.opt_theta,
                  {k: self.params[k] for k in self._theta_names}, theta_grads)

        # Phase two: re-run the forward pass with the updated backbone and
        # descend the merged controller loss; errors enter as constants.
        loss_prop_val = 0.0
        loss_weight_val = 0.0
        if self._phi_names:
            fw2 = self._forward(train=True)
            c_train = fw2.nll_all[self.train_idx]
            loss_prop = None
            loss_weight = None
            if self._use_prop:
                if cfg.strategy == BREAK:
                    p_at_l = fw2.tape.select_rows(fw2.probs, fw2.steps - 1)
                    ones = fw2.tape.constant(np.ones_like(p_at_l.data))
                    p_cont = fw2.tape.sub(ones, p_at_l)
                    p_cont_train = fw2.tape.gather_rows(p_cont, self.train_idx)
                    loss_prop = ctrl.break_loss(fw2.tape, c_train, p_cont_train)
                else:
                    step_errors, best_before = fw2.scan_errors
                    probs_train = [fw2.tape.gather_rows(p, self.train_idx)
                                   for p in fw2.probs]
                    loss_prop = ctrl.update_loss(
                        fw2.tape, probs_train,
                        [c[self.train_idx] for c in step_errors],
                        [b[self.train_idx] for b in best_before])
            if self._use_weight:
                w_all = self._priority_weights(fw2)
                w_train_t = fw2.tape.gather_rows(w_all, self.train_idx)
                loss_weight = ctrl.weight_objective(fw2.tape, w_train_t,
                                                    c_train, self.ccfg.lambda1)
            loss_ctrl = ctrl.merged_loss(fw2.tape, loss_prop, loss_weight,
                                         self.ccfg.lambda2)
            backward(fw2.tape, loss_ctrl)
            phi_grads = {k: fw2.leaves[k].grad for k in self._phi_names}
            adam_step(self.opt_phi,
                      {k: self.params[k] for k in self._phi_names}, phi_grads)
            loss_prop_val = loss_prop.item() if loss_prop is not None else 0.0
            loss_weight_val = loss_weight.item() if loss_weight is not None else 0.0

        return EpochStats(epoch=0, loss_supervised=loss_sup.item(),
                          loss_propagation=loss_prop_val,
                          loss_weight=loss_weight_val,
                          train_accuracy=0.0, val_accuracy=0.0)

    # -- evaluation -------------------------------------------------------

    def predict_labels(self, params: dict | None = None) -> np.ndarray:
        """Label predictions under the current depth policy, dropout off.

        The break strategy re-propagates with the learned per-node bounds so
        frozen rows feed their neighbors exactly as at deployment."""
        params = self.params if params is None else params
        fw = self._forward(params, train=False)
        if self._use_prop and self.cfg.strategy == BREAK:
            tape = Tape()
            leaves = {k: tape.leaf(v, requires_grad=False) for k, v in params.items()}
            x = tape.constant(self.x)
            trace = run(tape, self.adj, x, leaves, self.bcfg,
                        break_mask=fw.steps)
            logits = project_logits(tape, trace.htilde, leaves, self.bcfg)
            return logits.data.argmax(axis=1)
        return fw.logits.data.argmax(axis=1)

    def evaluate(self, mask) -> float:
        """Accuracy of the current parameters over the masked nodes."""
        mask = np.asarray(mask)
        idx = np.nonzero(mask)[0] if mask.dtype == bool else mask
        if len(idx) == 0:
            raise ShapeError("evaluate over an empty mask")
        labels = self.predict_labels()
        return float(np.mean(labels[idx] == self.y[idx]))

    def _accuracies(self, params: dict | None = None) -> tuple[float, float]:
        labels = self.predict_labels(params)
        train = float(np.mean(labels[self.train_idx] == self.y[self.train_idx]))
        val = float(np.mean(labels[self.val_idx] == self.y[self.val_idx]))
        return train, val

    # -- fit --------------------------------------------------------------

    def fit(self) -> TrainReport:
        """Train up to the epoch budget with early stopping on validation
        accuracy, then report metrics from the best parameters."""
        started = time.perf_counter()
        report = TrainReport(seed=self.cfg.seed)
        best_val = -1.0
        best_params = {k: v.copy() for k, v in self.params.items()}
        stale = 0
        for epoch in range(1, self.cfg.epochs + 1):
            stats = self.train_epoch()
            stats.epoch = epoch
            stats.train_accuracy, stats.val_accuracy = self._accuracies()
            report.epochs.append(stats)
            if stats.val_accuracy > best_val:
                best_val = stats.val_accuracy
                best_params = {k: v.copy() for k, v in self.params.items()}
                report.best_epoch = epoch
                stale = 0
            else:
                stale += 1
            if stale >= self.cfg.patience:
                break
        self.params = best_params
        report.best_val_accuracy = max(best_val, 0.0)
        report.test_accuracy = self.evaluate(self.data.masks.test)
        fw = self._forward(train=False)
        report.steps = fw.steps.copy()
        if self._use_weight:
            report.weights = self._priority_weights(fw).data[:, 0].copy()
        else:
            report.weights = np.ones(len(self.y))
        report.wall_clock = time.perf_counter() - started
        return report


def write_weights_steps_tsv(weights, steps, path) -> None:
    """Emit `node_id<TAB>weight<TAB>step` rows for visualization."""
    with open(path, "w") as fh:
        fh.write("node_id\tweight\tstep\n")
        for i, (w, l) in enumerate(zip(weights, steps)):
            fh.write(f"{i}\t{float(w)!r}\t{int(l)}\n")


# Published hyperparameter search ranges for the sweep CLI.
DEFAULT_SEARCH_SPACE = {
    "lr_backbone": [0.005, 0.01, 0.05, 0.1],
    "weight_decay": [1e-5, 5e-4, 1e-4, 5e-3, 1e-3],
    "lambda1": [0.01, 0.1, 1.0, 10.0, 100.0],
    "lambda2": [0.01, 0.1, 1.0, 10.0, 100.0],
    "epsilon": [0.1, 0.3, 0.5, 0.7, 0.9],
    "patience": [100, 200],
    "dropout": [0.0, 0.3, 0.5, 0.8],
}


@dataclass
class LeaderboardEntry:
    config: TrainConfig
    val_accuracy: float
    test_accuracy: float


def expand_space(base: TrainConfig, space: dict) -> list[TrainConfig]:
    """Cartesian product of the space in key order, applied over the base."""
    names = {f.name for f in fields(TrainConfig)}
    for key in space:
        if key not in names:
            raise ConfigError(f"unknown hyperparameter {key!r}")
    keys = list(space)
    configs = []
    for combo in itertools.product(*(space[k] for k in keys)):
        configs.append(replace(base, **dict(zip(keys, combo))))
    return configs


def grid_search(space, dataset, budget: int | None = None,
                base: TrainConfig | None = None):
    """Sweep configs in deterministic order, pick the best validation score.

    `space` is either a dict of value lists or an explicit config list.
    Returns (best config, leaderboard sorted by validation accuracy with
    ties broken by config order).
    """
    if isinstance(space, dict):
        configs = expand_space(base or TrainConfig(), space)
    else:
        configs = list(space)
    if not configs:
        raise ConfigError("empty search space")
    if budget is not None:
        configs = configs[:budget]
    entries = []
    for config in configs:
        report = Trainer(config, dataset).fit()
        entries.append(LeaderboardEntry(config=config,
                                        val_accuracy=report.best_val_accuracy,
                                        test_accuracy=report.test_accuracy))
    order = sorted(range(len(entries)),
                   key=lambda i: (-entries[i].val_accuracy, i))
    leaderboard = [entries[i] for i in order]
    return leaderboard[0].config, leaderboard
