import math

import numpy as np
import pytest

from semihoc import spl as spl_mod
from semihoc.datagen import NO_LABEL, SPLIT_UNLABELED
from semihoc.trainer import (
    TrainConfig,
    Trainer,
    load_checkpoint,
    run_training,
    save_checkpoint,
)


def config(**kw):
    base = dict(
        method="semihoc",
        epochs=4,
        labeled_batch_size=8,
        unlabeled_ratio=2,
        lr=0.05,
        dropout=0.3,
        hidden_dim=32,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_unknown_key_lists_valid(self):
        with pytest.raises(ValueError, match="unknown config keys.*learning_rate"):
            TrainConfig.from_dict({"learning_rate": 0.1})

    def test_bad_method(self):
        with pytest.raises(ValueError, match="method"):
            config(method="sgd").validate()

    def test_tau_one_allowed(self):
        config(tau=1.0).validate()


class TestLossContract:
    def test_loss_normalization(self, tiny_data):
        """l_d = l_d^labeled/N + l_d^unlabeled/M, recomputed from a manual step."""
        hierarchy, dataset = tiny_data
        trainer = Trainer(config(method="spl-oracle"), hierarchy, dataset)
        report = trainer.run_epoch()
        for l, u in zip(report.loss_labeled, report.loss_unlabeled):
            assert math.isfinite(l) and math.isfinite(u)
            assert l >= 0.0 and u >= 0.0
        assert any(u > 0 for u in report.loss_unlabeled)

    def test_supervised_has_no_unlabeled_loss(self, tiny_data):
        hierarchy, dataset = tiny_data
        reports, _ = run_training(config(method="supervised", epochs=2), hierarchy, dataset)
        assert all(u == 0.0 for r in reports for u in r.loss_unlabeled)

    def test_zero_weight_heads_start_at_log_k(self, tiny_data):
        hierarchy, dataset = tiny_data
        trainer = Trainer(config(method="supervised", dropout=0.0), hierarchy, dataset)
        for head in trainer.heads.students:
            for w in head.weights:
                w[...] = 0.0
        stats = {"spl_total": 0, "gated": 0, "node_counts": {}, "ood_chains": {}}
        batch_l = trainer.loader.next_batch()
        loss_l, _ = trainer._train_step(batch_l, np.empty(0, dtype=np.int64), stats)
        for d, loss in zip(trainer.depths, loss_l):
            assert loss == pytest.approx(math.log(len(hierarchy.depth_space(d))), rel=1e-9)


class TestDegeneracies:
    def test_tau_one_equals_supervised(self, tiny_data):
        hierarchy, dataset = tiny_data
        r_tau, _ = run_training(config(method="semihoc", tau=1.0, epochs=3), hierarchy, dataset)
        r_sup, _ = run_training(config(method="supervised", epochs=3), hierarchy, dataset)
        for a, b in zip(r_tau, r_sup):
            assert a.loss_labeled == b.loss_labeled
            assert all(u == 0.0 for u in a.loss_unlabeled)
            assert a.spl_total == 0

    def test_no_gate_equals_infinite_cutoffs(self, tiny_data, monkeypatch):
        hierarchy, dataset = tiny_data
        r_nogate, _ = run_training(config(method="semihoc-no-gate", epochs=3), hierarchy, dataset)
        monkeypatch.setattr(spl_mod, "detect_cutoff", lambda *a, **k: math.inf)
        r_inf, _ = run_training(config(method="semihoc", epochs=3), hierarchy, dataset)
        for a, b in zip(r_nogate, r_inf):
            assert a.loss_labeled == b.loss_labeled
            assert a.loss_unlabeled == b.loss_unlabeled
            assert a.spl_total == b.spl_total and a.gated_count == b.gated_count == 0


class TestSteps:
    def test_internal_spl_trains_only_its_depth(self, tiny_data):
        """A depth-1 chain node only contributes where it lives in a space."""
        hierarchy, dataset = tiny_data
        trainer = Trainer(config(), hierarchy, dataset)
        from semihoc.spl import SplChain

        depth1_node = hierarchy.children[0][0]
        targets = trainer._targets_from_chains([SplChain((depth1_node,), 0.95)], 1)
        assert targets.any()
        for d in trainer.depths[1:]:
            deeper = trainer._targets_from_chains([SplChain((depth1_node,), 0.95)], d)
            assert not deeper.any()

    def test_semihoc_targets_supported_inside_subtree(self, tiny_data):
        """Chain-node targets at depth d are one-hot at the node itself, so
        their support sits inside Subtree(node) ∩ depth space d."""
        hierarchy, dataset = tiny_data
        trainer = Trainer(config(), hierarchy, dataset)
        from semihoc.spl import SplChain

        for c in range(1, hierarchy.n_nodes):
            chain = SplChain(tuple(hierarchy.ancestors_or_self(c)[1:]), 0.95)
            for d in trainer.depths:
                targets = trainer._targets_from_chains([chain], d)[0]
                space = hierarchy.depth_space(d).nodes
                support = {space[j] for j in np.nonzero(targets)[0]}
                allowed = set().union(
                    *(hierarchy.subtree(n) for n in chain.nodes if hierarchy.space_index(n, d) >= 0)
                ) if support else set()
                assert support <= (allowed & set(space))

    def test_oracle_chain_is_ancestor_path(self, tiny_data):
        hierarchy, dataset = tiny_data
        trainer = Trainer(config(method="spl-oracle"), hierarchy, dataset)
        some_leaf = sorted(hierarchy.id_leaves)[0]
        chain = trainer._chains_oracle([some_leaf])[0]
        assert chain.nodes == hierarchy.ancestors_or_self(some_leaf)[1:]

    def test_oracle_refuses_missing_ground_truth(self, tiny_data):
        hierarchy, dataset = tiny_data
        from dataclasses import replace

        labels = dataset.labels.copy()
        labels[dataset.indices(SPLIT_UNLABELED)[0]] = NO_LABEL
        broken = replace(dataset, labels=labels)
        with pytest.raises(ValueError, match="ground truth"):
            Trainer(config(method="spl-oracle"), hierarchy, broken)

    def test_hierarchy_hash_mismatch_rejected(self, tiny_data):
        hierarchy, dataset = tiny_data
        from dataclasses import replace

        with pytest.raises(ValueError, match="hierarchy"):
            Trainer(config(), hierarchy, replace(dataset, hierarchy_hash=1))


class TestDeterminismAndResume:
    def test_identical_runs_byte_identical_csv(self, tiny_data, tmp_path):
        hierarchy, dataset = tiny_data
        run_training(config(), hierarchy, dataset, out_dir=tmp_path / "a")
        run_training(config(), hierarchy, dataset, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_resume_matches_uninterrupted(self, tiny_data, tmp_path):
        hierarchy, dataset = tiny_data
        cfg = config(epochs=6, checkpoint_every=3)
        run_training(cfg, hierarchy, dataset, out_dir=tmp_path / "full")
        state = load_checkpoint(tmp_path / "full" / "ckpt_epoch0003.bin")
        run_training(cfg, hierarchy, dataset, out_dir=tmp_path / "resumed", resume=state)
        full = (tmp_path / "full" / "metrics.csv").read_text().splitlines()
        resumed = (tmp_path / "resumed" / "metrics.csv").read_text().splitlines()
        assert resumed[0] == full[0]
        assert resumed[1:] == full[4:]

    def test_checkpoint_roundtrip_preserves_state(self, tiny_data, tmp_path):
        hierarchy, dataset = tiny_data
        trainer = Trainer(config(), hierarchy, dataset)
        trainer.run_epoch()
        path = tmp_path / "ckpt.bin"
        save_checkpoint(trainer, path)
        clone = Trainer(config(), hierarchy, dataset)
        clone.load_state_dict(load_checkpoint(path))
        a = trainer.run_epoch()
        b = clone.run_epoch()
        assert a.loss_labeled == b.loss_labeled
        assert a.loss_unlabeled == b.loss_unlabeled

    def test_wrong_config_resume_rejected(self, tiny_data, tmp_path):
        hierarchy, dataset = tiny_data
        trainer = Trainer(config(), hierarchy, dataset)
        save_checkpoint(trainer, tmp_path / "c.bin")
        other = Trainer(config(lr=0.123), hierarchy, dataset)
        with pytest.raises(ValueError, match="config"):
            other.load_state_dict(load_checkpoint(tmp_path / "c.bin"))


class TestEpochAccounting:
    def test_epoch_is_one_unlabeled_pass(self, tiny_data):
        hierarchy, dataset = tiny_data
        trainer = Trainer(config(), hierarchy, dataset)
        n_unlabeled = len(dataset.indices(SPLIT_UNLABELED))
        batch = trainer.config.labeled_batch_size * trainer.config.unlabeled_ratio
        assert trainer._steps_per_epoch() == math.ceil(n_unlabeled / batch)

    def test_every_unlabeled_sample_logged_once_per_epoch(self, tiny_data):
        hierarchy, dataset = tiny_data
        trainer = Trainer(config(tau=0.5), hierarchy, dataset)
        seen = []
        original = trainer._chains_semihoc

        def spy(x_u, sample_ids, gts):
            seen.extend(sample_ids)
            return original(x_u, sample_ids, gts)

        trainer._chains_semihoc = spy
        trainer.run_epoch()
        assert sorted(seen) == sorted(int(g) for g in dataset.sample_ids[dataset.indices(SPLIT_UNLABELED)])
