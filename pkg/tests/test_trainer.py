import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import prioprop as pp
from prioprop import (AdamState, ConfigError, ShapeError, Tape, adam_step,
                      backward)
from prioprop.autodiff import nll_per_node
from prioprop.backbone import BackboneConfig, init_backbone_params, run
from prioprop.controllers import (ControllerConfig, break_forward, break_loss,
                                  decide_break_steps, init_controller_params)
from prioprop.trainer import TrainConfig, Trainer, grid_search


def two_clique_dataset():
    """Two disjoint 4-cliques with exact cluster-mean features."""
    edges = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    edges += [(i, j) for i in range(4, 8) for j in range(i + 1, 8)]
    g = pp.build_graph(edges, 8)
    x = np.array([[1.0, 0.0]] * 4 + [[0.0, 1.0]] * 4, dtype=np.float32)
    labels = pp.Labels(y=np.array([0] * 4 + [1] * 4), num_classes=2)
    masks = pp.SplitMasks(train=np.array([1, 1, 0, 0, 1, 1, 0, 0], bool),
                          val=np.array([0, 0, 1, 0, 0, 0, 1, 0], bool),
                          test=np.array([0, 0, 0, 1, 0, 0, 0, 1], bool))
    return pp.DatasetBundle(graph=g, features=x, labels=labels, masks=masks)


def constant_feature_dataset():
    """Identical features everywhere: predictions are row-constant, and the
    balanced validation set pins the accuracy at 1/c forever."""
    g = pp.build_graph([(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)], 6)
    x = np.ones((6, 3), dtype=np.float32)
    labels = pp.Labels(y=np.array([0, 1, 0, 1, 0, 1]), num_classes=2)
    masks = pp.SplitMasks(train=np.array([1, 1, 0, 0, 0, 0], bool),
                          val=np.array([0, 0, 1, 1, 0, 0], bool),
                          test=np.array([0, 0, 0, 0, 1, 1], bool))
    return pp.DatasetBundle(graph=g, features=x, labels=labels, masks=masks)


def small_sbm(seed=3):
    return pp.generate_sbm(pp.SbmSpec(n=120, blocks=3, p_in=0.15, p_out=0.01,
                                      feature_dim=8, separation=1.5,
                                      labels_per_class=5, seed=seed))


def quick_cfg(**kw):
    base = dict(strategy="break", num_steps=3, hidden=8, dropout=0.2,
                controller_hidden=8, epochs=12, patience=12, seed=0,
                lr_backbone=0.05, lr_controller=0.05)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainEpoch:
    def test_zero_epochs_leave_parameters_unchanged(self):
        trainer = Trainer(quick_cfg(epochs=0), small_sbm())
        before = {k: v.copy() for k, v in trainer.params.items()}
        report = trainer.fit()
        assert report.epochs == []
        for k in before:
            assert_array_equal(trainer.params[k], before[k])

    def test_same_seed_same_trajectory(self):
        ds = small_sbm()
        r1 = Trainer(quick_cfg(), ds).fit()
        r2 = Trainer(quick_cfg(), ds).fit()
        assert r1.csv_text() == r2.csv_text()

    def test_different_seeds_differ(self):
        ds = small_sbm()
        r1 = Trainer(quick_cfg(seed=0), ds).fit()
        r2 = Trainer(quick_cfg(seed=1), ds).fit()
        assert r1.csv_text() != r2.csv_text()

    def test_two_clique_toy_reaches_full_train_accuracy(self):
        cfg = quick_cfg(dropout=0.0, epochs=200, patience=200)
        report = Trainer(cfg, two_clique_dataset()).fit()
        assert max(s.train_accuracy for s in report.epochs) == 1.0

    def test_theta_step_descends_supervised_loss(self):
        # One small step with frozen unit weights must not increase the loss
        # (dropout off so consecutive forwards see the same function).
        cfg = quick_cfg(dropout=0.0, lr_backbone=1e-4, weight_decay=0.0,
                        weight_controller=False, propagation_controller=False,
                        epochs=0)
        trainer = Trainer(cfg, small_sbm())
        s1 = trainer.train_epoch()
        s2 = trainer.train_epoch()
        assert s2.loss_supervised <= s1.loss_supervised + 1e-12

    def test_phi_step_ascends_weight_objective(self):
        # Backbone frozen via zero learning rate, dropout off: successive
        # epochs must raise the weight objective.
        cfg = quick_cfg(dropout=0.0, lr_backbone=0.0, lr_controller=0.05,
                        propagation_controller=False, epochs=0)
        trainer = Trainer(cfg, small_sbm())
        s1 = trainer.train_epoch()
        s2 = trainer.train_epoch()
        assert s2.loss_weight > s1.loss_weight

    def test_update_strategy_with_gcn_rejected(self):
        with pytest.raises(ConfigError):
            quick_cfg(strategy="update", backbone="gcn")


class TestEvaluate:
    def test_perfect_predictions_score_one(self):
        cfg = quick_cfg(dropout=0.0, epochs=60, patience=60)
        trainer = Trainer(cfg, two_clique_dataset())
        trainer.fit()
        assert trainer.evaluate(trainer.data.masks.train) == 1.0

    def test_empty_mask_rejected(self):
        trainer = Trainer(quick_cfg(), small_sbm())
        with pytest.raises(ShapeError):
            trainer.evaluate(np.zeros(120, dtype=bool))

    def test_matches_manual_accuracy(self):
        trainer = Trainer(quick_cfg(epochs=3), small_sbm())
        trainer.fit()
        labels = trainer.predict_labels()
        mask = trainer.data.masks.test
        manual = float(np.mean(labels[mask] == trainer.y[mask]))
        assert trainer.evaluate(mask) == manual

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        spec = pp.SbmSpec(n=20, blocks=2, p_in=0.4, p_out=0.1, feature_dim=6,
                          separation=1.2, labels_per_class=3, seed=5)
        ds = pp.generate_sbm(spec)
        perm = rng.permutation(20)
        pg = pp.build_graph([(perm[i], perm[j]) for i, j in ds.graph.edge_pairs()], 20)
        def scatter(arr):
            out = np.empty_like(arr)
            out[perm] = arr
            return out
        pds = pp.DatasetBundle(
            graph=pg, features=scatter(ds.features),
            labels=pp.Labels(y=scatter(ds.labels.y), num_classes=2),
            masks=pp.SplitMasks(train=scatter(ds.masks.train),
                                val=scatter(ds.masks.val),
                                test=scatter(ds.masks.test)))
        cfg = quick_cfg(dropout=0.0)
        t1 = Trainer(cfg, ds)       # same seed: identical parameters
        t2 = Trainer(cfg, pds)
        assert t1.evaluate(ds.masks.test) == t2.evaluate(pds.masks.test)
        assert_array_equal(t2.predict_labels()[perm], t1.predict_labels())


class TestFit:
    def test_patience_one_with_constant_validation_stops_after_two_epochs(self):
        cfg = quick_cfg(patience=1, epochs=50)
        report = Trainer(cfg, constant_feature_dataset()).fit()
        assert len(report.epochs) == 2

    def test_best_val_accuracy_is_max_over_epochs(self):
        report = Trainer(quick_cfg(epochs=8), small_sbm()).fit()
        assert report.best_val_accuracy == max(s.val_accuracy for s in report.epochs)

    def test_report_vectors_cover_all_nodes(self):
        ds = small_sbm()
        report = Trainer(quick_cfg(epochs=4), ds).fit()
        assert report.weights.shape == (120,)
        assert report.steps.shape == (120,)
        assert np.all((report.steps >= 1) & (report.steps <= 3))
        assert np.all((report.weights > 0) & (report.weights < 1))

    def test_homophilous_sbm_break_accuracy(self):
        spec = pp.SbmSpec(n=400, blocks=4, p_in=0.05, p_out=0.005,
                          feature_dim=32, separation=1.0, labels_per_class=10,
                          seed=3)
        ds = pp.generate_sbm(spec)
        cfg = TrainConfig(strategy="break", num_steps=8, hidden=32,
                          dropout=0.3, controller_hidden=16, epochs=100,
                          patience=100, seed=0, lr_backbone=0.05,
                          lr_controller=0.01)
        report = Trainer(cfg, ds).fit()
        assert report.test_accuracy >= 0.85


class TestAblations:
    """The ablation flags must reduce to directly-constructed baselines."""

    def _plain_baseline(self, cfg: TrainConfig, ds) -> list[float]:
        """Fixed-depth unweighted training written from the primitives."""
        bcfg = BackboneConfig(kind=cfg.backbone, in_dim=ds.features.shape[1],
                              num_classes=ds.labels.num_classes,
                              num_steps=cfg.num_steps, hidden=cfg.hidden,
                              alpha=cfg.alpha, dropout=cfg.dropout)
        init_seq, drop_seq = np.random.SeedSequence(cfg.seed).spawn(2)
        params = init_backbone_params(bcfg, np.random.default_rng(init_seq))
        dropout_rng = np.random.default_rng(drop_seq)
        adj = pp.normalize(ds.graph)
        x = np.asarray(ds.features, dtype=np.float64)
        train_idx = np.nonzero(ds.masks.train)[0]
        opt = AdamState(lr=cfg.lr_backbone, weight_decay=cfg.weight_decay)
        losses = []
        for _ in range(cfg.epochs):
            tape = Tape()
            leaves = {k: tape.leaf(v) for k, v in params.items()}
            trace = run(tape, adj, tape.constant(x), leaves, bcfg,
                        dropout_rng=dropout_rng)
            loss = tape.masked_nll(trace.htilde, ds.labels.y, train_idx)
            backward(tape, loss)
            adam_step(opt, params, {k: leaves[k].grad for k in params})
            losses.append(loss.item())
        return losses

    def _unweighted_break_baseline(self, cfg: TrainConfig, ds) -> list[float]:
        """Break-strategy training with the weight controller removed,
        written from the primitives (unit weights, controller loss L_p)."""
        bcfg = BackboneConfig(kind=cfg.backbone, in_dim=ds.features.shape[1],
                              num_classes=ds.labels.num_classes,
                              num_steps=cfg.num_steps, hidden=cfg.hidden,
                              alpha=cfg.alpha, dropout=cfg.dropout)
        ccfg = ControllerConfig(hidden=cfg.controller_hidden,
                                epsilon=cfg.epsilon, lambda1=cfg.lambda1,
                                lambda2=cfg.lambda2)
        init_seq, drop_seq = np.random.SeedSequence(cfg.seed).spawn(2)
        init_rng = np.random.default_rng(init_seq)
        theta = init_backbone_params(bcfg, init_rng)
        phi = init_controller_params(bcfg, ccfg, init_rng)
        dropout_rng = np.random.default_rng(drop_seq)
        adj = pp.normalize(ds.graph)
        z = pp.build_priority(ds.graph, ds.features).standardized
        x = np.asarray(ds.features, dtype=np.float64)
        y = ds.labels.y
        train_idx = np.nonzero(ds.masks.train)[0]
        opt_t = AdamState(lr=cfg.lr_backbone, weight_decay=cfg.weight_decay)
        opt_p = AdamState(lr=cfg.lr_controller)

        def forward():
            tape = Tape()
            leaves = {k: tape.leaf(v) for k, v in {**theta, **phi}.items()}
            trace = run(tape, adj, tape.constant(x), leaves, bcfg,
                        dropout_rng=dropout_rng)
            probs = break_forward(tape, leaves, z, trace.H[0].data,
                                  [h.data for h in trace.H[1:]],
                                  [h.data for h in trace.H_hat], ccfg)
            steps = decide_break_steps(np.stack([p.data[:, 0] for p in probs]),
                                       ccfg.epsilon)
            htilde = tape.select_rows(trace.H[1:], steps - 1)
            return tape, leaves, probs, steps, htilde

        losses = []
        for _ in range(cfg.epochs):
            tape, leaves, probs, steps, htilde = forward()
            loss = tape.masked_nll(htilde, y, train_idx)
            backward(tape, loss)
            adam_step(opt_t, theta, {k: leaves[k].grad for k in theta})
            losses.append(loss.item())

            tape, leaves, probs, steps, htilde = forward()
            c_train = nll_per_node(htilde.data, y)[train_idx]
            p_at_l = tape.select_rows(probs, steps - 1)
            p_cont = tape.sub(tape.constant(np.ones_like(p_at_l.data)), p_at_l)
            lp = break_loss(tape, c_train, tape.gather_rows(p_cont, train_idx))
            backward(tape, lp)
            adam_step(opt_p, phi, {k: leaves[k].grad for k in phi})
        return losses

    def test_no_controllers_reduces_to_plain_backbone(self):
        ds = small_sbm()
        cfg = quick_cfg(epochs=6, weight_controller=False,
                        propagation_controller=False, patience=6)
        report = Trainer(cfg, ds).fit()
        base = self._plain_baseline(cfg, ds)
        assert [s.loss_supervised for s in report.epochs] == base

    def test_no_weight_controller_reproduces_unit_weight_path(self):
        ds = small_sbm()
        cfg = quick_cfg(epochs=6, weight_controller=False, patience=6)
        report = Trainer(cfg, ds).fit()
        base = self._unweighted_break_baseline(cfg, ds)
        assert [s.loss_supervised for s in report.epochs] == base

    def test_no_propagation_controller_runs_fixed_depth(self):
        ds = small_sbm()
        cfg = quick_cfg(epochs=4, propagation_controller=False, patience=4)
        report = Trainer(cfg, ds).fit()
        assert np.all(report.steps == cfg.num_steps)


class TestGridSearch:
    def test_singleton_space_returns_that_config(self):
        ds = small_sbm()
        cfg = quick_cfg(epochs=2, patience=2)
        best, board = grid_search({"lambda1": [1.0]}, ds, base=cfg)
        assert best == cfg.__class__(**{**cfg.__dict__, "lambda1": 1.0})
        assert len(board) == 1

    def test_leaderboard_sorted_with_stable_ties(self):
        ds = small_sbm()
        cfg = quick_cfg(epochs=3, patience=3)
        _, board = grid_search({"lambda1": [0.1, 1.0, 10.0]}, ds, base=cfg)
        vals = [e.val_accuracy for e in board]
        assert vals == sorted(vals, reverse=True)
        assert board[0].val_accuracy >= max(vals)

    def test_budget_caps_configurations(self):
        ds = small_sbm()
        cfg = quick_cfg(epochs=2, patience=2)
        _, board = grid_search({"lambda1": [0.1, 1.0, 10.0]}, ds, budget=2,
                               base=cfg)
        assert len(board) == 2

    def test_empty_space_rejected(self):
        with pytest.raises(ConfigError):
            grid_search([], small_sbm())
