"""Epoch-level training loops for the self-training framework and baselines.

An epoch is one full pass over the unlabeled split; labeled batches cycle
independently (without replacement inside a cycle). Per step every depth
head accumulates a labeled cross-entropy term, the chosen method adds its
unlabeled term, and the per-depth loss is l_d = l_d^labeled/N +
l_d^unlabeled/M with N and M the batch sizes actually used. Cutoff
detection runs at every epoch end.

Determinism contract: all randomness flows through named substreams of the
run seed (weight init, labeled/unlabeled shuffling, labeled/unlabeled
dropout), so two runs with the same config produce byte-identical metrics,
and a resumed checkpoint replays the interrupted run exactly. Keeping the
labeled streams separate from the unlabeled ones means methods that never
touch unlabeled data still see the exact same labeled batches and dropout
masks as methods that do.
"""

from __future__ import annotations

import json
import math
import pickle
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import heads as heads_mod
from .datagen import NO_LABEL, SPLIT_LABELED, SPLIT_TEST, SPLIT_UNLABELED, FeatureDataset
from .heads import DepthHeads, OptimizerParams
from .hierarchy import Hierarchy, hierarchy_hash
from .metrics import bmhd, spl_purity_and_depth
from .prohoc import fuse_batch, predict_nodes
from .rng import StreamSet
from .spl import AgeGateState, SplChain, SplLog, apply_gating, compute_spls_batch, update_cutoffs, update_log

METHODS = ("semihoc", "semihoc-no-gate", "supervised", "ssl-node", "ssl-per-depth", "spl-oracle")

CHECKPOINT_MAGIC = b"SHCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    method: str = "semihoc"
    epochs: int = 400
    labeled_batch_size: int = 128
    unlabeled_ratio: int = 4
    lr: float = 0.01
    dropout: float = 0.3
    weight_decay: float = 0.001
    momentum: float = 0.9
    ema_momentum: float = 0.999
    tau: float = 0.95
    gate_bin_width: int = 1
    gate_drop_threshold: float = 0.01
    hidden_dim: int = 512
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.epochs < 1 or self.labeled_batch_size < 1 or self.unlabeled_ratio < 1:
            raise ValueError("epochs, batch size and ratio must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not 0.0 <= self.momentum < 1.0 or not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("momenta must be in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")
        if self.gate_bin_width < 1 or not 0.0 < self.gate_drop_threshold < 1.0:
            raise ValueError("invalid gate parameters")
        if self.hidden_dim < 1 or self.seed < 0:
            raise ValueError("invalid hidden_dim or seed")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("eval_every and checkpoint_every must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        valid = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - valid)
        if unknown:
            raise ValueError(f"unknown config keys {unknown}; valid keys: {sorted(valid)}")
        config = cls(**data)
        config.validate()
        return config


@dataclass
class EpochReport:
    epoch: int
    method: str
    loss_labeled: tuple[float, ...]
    loss_unlabeled: tuple[float, ...]
    spl_node_counts: dict[int, int]
    spl_total: int
    gated_count: int
    coverage: float | None
    purity: float | None
    avg_depth: float | None
    bmhd_id: float | None = None
    bmhd_ood: float | None = None
    bmhd_mix: float | None = None
    wall_clock: float = 0.0


class _LabeledLoader:
    """Cycles through labeled indices without replacement inside a cycle.

    When the whole labeled set fits in one batch, every step simply uses the
    full set and no randomness is consumed.
    """

    def __init__(self, indices: np.ndarray, batch_size: int, rng):
        self.indices = indices
        self.batch_size = batch_size
        self.rng = rng
        self.perm = np.empty(0, dtype=np.int64)
        self.pos = 0

    def next_batch(self) -> np.ndarray:
        if len(self.indices) <= self.batch_size:
            return self.indices
        out = []
        need = self.batch_size
        while need > 0:
            if self.pos >= len(self.perm):
                self.perm = self.rng.permutation(len(self.indices))
                self.pos = 0
            take = min(need, len(self.perm) - self.pos)
            out.append(self.indices[self.perm[self.pos : self.pos + take]])
            self.pos += take
            need -= take
        return np.concatenate(out)

    def state_dict(self) -> dict:
        return {"perm": self.perm.copy(), "pos": self.pos}

    def load_state_dict(self, state: dict) -> None:
        self.perm = np.asarray(state["perm"], dtype=np.int64)
        self.pos = int(state["pos"])


class Trainer:
    """Owns the heads, pseudo-label log, gate state and RNG streams."""

    def __init__(self, config: TrainConfig, hierarchy: Hierarchy, dataset: FeatureDataset):
        config.validate()
        expected = hierarchy_hash(hierarchy)
        if dataset.hierarchy_hash != expected:
            raise ValueError(
                f"dataset was built against a different hierarchy "
                f"(hash {dataset.hierarchy_hash:#018x} != {expected:#018x})"
            )
        dataset.validate(hierarchy)
        self.config = config
        self.hierarchy = hierarchy
        self.dataset = dataset
        self.hash = expected

        self.streams = StreamSet(config.seed)
        self.heads = DepthHeads(hierarchy, dataset.dim, hidden=config.hidden_dim, dropout=config.dropout)
        self.heads.init_params(self.streams.get("init"))
        self.opt = OptimizerParams(lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)

        self.log = SplLog()
        self.gate = AgeGateState(config.gate_bin_width, config.gate_drop_threshold)
        self.gating_active = config.method == "semihoc"
        # analysis instrumentation: first assignment ever per (node, sample)
        self.history: dict[tuple[int, int], tuple[int, bool | None]] = {}
        self.epoch = 0

        self.labeled_idx = dataset.indices(SPLIT_LABELED)
        self.unlabeled_idx = dataset.indices(SPLIT_UNLABELED)
        self.test_idx = dataset.indices(SPLIT_TEST)
        if config.method != "supervised" and len(self.unlabeled_idx) == 0:
            raise ValueError(f"method {config.method!r} needs a non-empty unlabeled split")
        if len(self.labeled_idx) == 0:
            raise ValueError("training needs a non-empty labeled split")
        if config.method == "spl-oracle":
            gts = self.dataset.labels[self.unlabeled_idx]
            if (gts == NO_LABEL).any():
                raise ValueError("spl-oracle needs ground truth for every unlabeled sample")

        self.loader = _LabeledLoader(
            self.labeled_idx, config.labeled_batch_size, self.streams.get("shuffle/labeled")
        )
        self._qcache: dict[tuple[int, int], np.ndarray] = {}
        self._subtree_cache: dict[int, frozenset[int]] = {}
        self._gt_by_sid = {int(g): int(c) for g, c in zip(dataset.sample_ids, dataset.labels)}

    # -- small helpers -----------------------------------------------------------

    @property
    def depths(self) -> list[int]:
        return self.heads.depths

    def _q_row(self, node: int, d: int) -> np.ndarray:
        key = (node, d)
        if key not in self._qcache:
            t = self.hierarchy.target_distribution(node, d)
            size = len(self.hierarchy.depth_space(d))
            self._qcache[key] = t.probs if t is not None else np.zeros(size)
        return self._qcache[key]

    def _subtree(self, node: int) -> frozenset[int]:
        if node not in self._subtree_cache:
            self._subtree_cache[node] = self.hierarchy.subtree(node)
        return self._subtree_cache[node]

    def _labeled_targets(self, d: int, labels: np.ndarray) -> np.ndarray:
        return np.stack([self._q_row(int(c), d) for c in labels])

    def _steps_per_epoch(self) -> int:
        batch = self.config.labeled_batch_size * self.config.unlabeled_ratio
        if len(self.unlabeled_idx) == 0:
            return max(1, math.ceil(len(self.labeled_idx) / self.config.labeled_batch_size))
        return math.ceil(len(self.unlabeled_idx) / batch)

    def _features(self, idx: np.ndarray) -> np.ndarray:
        return self.dataset.features[idx].astype(np.float64)

    # -- per-method unlabeled target construction ---------------------------------

    def _chains_semihoc(self, x_u: np.ndarray, sample_ids, gts) -> tuple[list[SplChain], list[SplChain]]:
        fused = fuse_batch(self.heads.teacher_forward_all(x_u), self.hierarchy)
        chains = compute_spls_batch(fused, self.hierarchy, self.config.tau)
        for chain, g, gt in zip(chains, sample_ids, gts):
            update_log(self.log, g, chain, self.epoch)
            for node in chain.nodes:
                if (node, g) not in self.history:
                    correct = None if gt == NO_LABEL else gt in self._subtree(node)
                    self.history[(node, g)] = (self.epoch, correct)
        gated = [apply_gating(chain, self.log, self.gate, g) for chain, g in zip(chains, sample_ids)]
        return chains, gated

    def _chains_oracle(self, gts) -> list[SplChain]:
        chains = []
        for gt in gts:
            path = self.hierarchy.ancestors_or_self(int(gt))[1:]
            chains.append(SplChain(tuple(path), self.config.tau))
        return chains

    def _targets_from_chains(self, chains: list[SplChain], d: int) -> np.ndarray:
        size = len(self.hierarchy.depth_space(d))
        out = np.zeros((len(chains), size))
        for i, chain in enumerate(chains):
            for node in chain.nodes:
                if self.hierarchy.space_index(node, d) >= 0:
                    out[i] += self._q_row(node, d)
        return out

    def _targets_ssl_node(self, x_u: np.ndarray, d_targets: list[np.ndarray]) -> None:
        fused = fuse_batch(self.heads.teacher_forward_all(x_u), self.hierarchy)
        preds = predict_nodes(fused)
        conf = fused[np.arange(len(preds)), preds]
        passing = conf > self.config.tau
        for i in np.nonzero(passing)[0]:
            node = int(preds[i])
            for d in self.depths:
                d_targets[d - 1][i] += self._q_row(node, d)

    def _targets_ssl_perdepth(self, x_u: np.ndarray, d_targets: list[np.ndarray]) -> None:
        for d in self.depths:
            probs = heads_mod.forward(self.heads.teacher(d), x_u, mode="eval")
            preds = np.argmax(probs, axis=1)
            conf = probs[np.arange(len(preds)), preds]
            space = self.hierarchy.depth_space(d)
            for i in np.nonzero(conf > self.config.tau)[0]:
                d_targets[d - 1][i] += self._q_row(int(space.nodes[preds[i]]), d)

    # -- one optimization step ------------------------------------------------------

    def _train_step(self, batch_l: np.ndarray, batch_u: np.ndarray, stats: dict) -> tuple[list[float], list[float]]:
        cfg = self.config
        x_l = self._features(batch_l)
        labels_l = self.dataset.labels[batch_l]
        n_l = len(batch_l)

        uses_unlabeled = cfg.method != "supervised"
        x_u = self._features(batch_u) if uses_unlabeled else None
        m_u = len(batch_u) if uses_unlabeled else 0

        d_targets: list[np.ndarray] | None = None
        if uses_unlabeled:
            d_targets = [np.zeros((m_u, len(self.hierarchy.depth_space(d)))) for d in self.depths]
            sample_ids = [int(g) for g in self.dataset.sample_ids[batch_u]]
            gts = [int(c) for c in self.dataset.labels[batch_u]]
            if cfg.method in ("semihoc", "semihoc-no-gate"):
                chains, gated = self._chains_semihoc(x_u, sample_ids, gts)
                for chain, gchain, g, gt in zip(chains, gated, sample_ids, gts):
                    stats["spl_total"] += len(chain)
                    stats["gated"] += len(chain) - len(gchain)
                    for node in chain.nodes:
                        stats["node_counts"][node] = stats["node_counts"].get(node, 0) + 1
                    if gt != NO_LABEL and not self.hierarchy.is_leaf(gt):
                        stats["ood_chains"][g] = gchain
                for d in self.depths:
                    d_targets[d - 1] = self._targets_from_chains(gated, d)
            elif cfg.method == "spl-oracle":
                chains = self._chains_oracle(gts)
                for d in self.depths:
                    d_targets[d - 1] = self._targets_from_chains(chains, d)
            elif cfg.method == "ssl-node":
                self._targets_ssl_node(x_u, d_targets)
            elif cfg.method == "ssl-per-depth":
                self._targets_ssl_perdepth(x_u, d_targets)

        drop_l = self.streams.get("dropout/labeled")
        drop_u = self.streams.get("dropout/unlabeled")
        loss_l_out, loss_u_out = [], []
        for d in self.depths:
            student = self.heads.student(d)
            t_l = self._labeled_targets(d, labels_l)
            masks_l = heads_mod.sample_masks(student, n_l, drop_l)
            loss_l, grads = heads_mod.ce_loss_and_grad(student, x_l, t_l, mode="train", masks=masks_l)
            for g in grads:
                g *= 1.0 / n_l

            loss_u = 0.0
            if uses_unlabeled:
                masks_u = heads_mod.sample_masks(student, m_u, drop_u)
                t_u = d_targets[d - 1]
                if t_u.any():
                    loss_u, grads_u = heads_mod.ce_loss_and_grad(student, x_u, t_u, mode="train", masks=masks_u)
                    for g, gu in zip(grads, grads_u):
                        g += gu * (1.0 / m_u)

            self.heads.sgd_step(d, grads, self.opt)
            loss_l_out.append(loss_l / n_l)
            loss_u_out.append(loss_u / m_u if m_u else 0.0)
        self.heads.ema_update_all(cfg.ema_momentum)
        return loss_l_out, loss_u_out

    # -- epochs -------------------------------------------------------------------

    def run_epoch(self) -> EpochReport:
        cfg = self.config
        start = time.perf_counter()
        stats = {"spl_total": 0, "gated": 0, "node_counts": {}, "ood_chains": {}}
        sum_l = np.zeros(len(self.depths))
        sum_u = np.zeros(len(self.depths))

        if cfg.method == "supervised" or len(self.unlabeled_idx) == 0:
            batches_u = [np.empty(0, dtype=np.int64)] * self._steps_per_epoch()
        else:
            perm = self.streams.get("shuffle/unlabeled").permutation(len(self.unlabeled_idx))
            order = self.unlabeled_idx[perm]
            batch = cfg.labeled_batch_size * cfg.unlabeled_ratio
            batches_u = [order[i : i + batch] for i in range(0, len(order), batch)]

        for batch_u in batches_u:
            batch_l = self.loader.next_batch()
            loss_l, loss_u = self._train_step(batch_l, batch_u, stats)
            sum_l += loss_l
            sum_u += loss_u

        if self.gating_active:
            update_cutoffs(self.gate, self.log, self.epoch)

        purity = avg_depth = None
        if stats["ood_chains"]:
            gts = {g: self._gt_by_sid[g] for g in stats["ood_chains"]}
            result = spl_purity_and_depth(stats["ood_chains"], gts, self.hierarchy)
            if result is not None:
                purity, avg_depth = result

        n_steps = len(batches_u)
        report = EpochReport(
            epoch=self.epoch,
            method=cfg.method,
            loss_labeled=tuple(sum_l / n_steps),
            loss_unlabeled=tuple(sum_u / n_steps),
            spl_node_counts=stats["node_counts"],
            spl_total=stats["spl_total"],
            gated_count=stats["gated"],
            coverage=(stats["spl_total"] - stats["gated"]) / stats["spl_total"] if stats["spl_total"] else None,
            purity=purity,
            avg_depth=avg_depth,
            wall_clock=time.perf_counter() - start,
        )
        self.epoch += 1
        return report

    def evaluate(self, idx: np.ndarray | None = None) -> tuple[float | None, float | None, float | None]:
        """Teacher-model scores on a sample subset (default: the test split)."""
        if idx is None:
            idx = self.test_idx
        idx = idx[self.dataset.labels[idx] != NO_LABEL]
        if len(idx) == 0:
            return None, None, None
        probs = predict_dataset(self.heads, self.hierarchy, self.dataset.features[idx])
        preds = predict_nodes(probs)
        report = bmhd(preds, self.dataset.labels[idx], self.hierarchy)
        mix = 0.5 * (report.id + report.ood) if report.id is not None and report.ood is not None else None
        return report.id, report.ood, mix

    # -- checkpointing ---------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "hierarchy_hash": self.hash,
            "epoch": self.epoch,
            "heads": self.heads.state_dict(),
            "streams": self.streams.state_dict(),
            "log": self.log.state_dict(),
            "gate": self.gate.state_dict(),
            "history": [(c, g, e, ok) for (c, g), (e, ok) in self.history.items()],
            "loader": self.loader.state_dict(),
        }

    def load_state_dict(self, state: dict) -> None:
        if state["hierarchy_hash"] != self.hash:
            raise ValueError("checkpoint was trained against a different hierarchy")
        if state["config"] != asdict(self.config):
            raise ValueError("checkpoint config does not match the requested config")
        self.epoch = int(state["epoch"])
        self.heads.load_state_dict(state["heads"])
        self.streams.load_state_dict(state["streams"])
        self.log.load_state_dict(state["log"])
        self.gate.load_state_dict(state["gate"])
        self.history = {(c, g): (e, ok) for c, g, e, ok in state["history"]}
        self.loader.load_state_dict(state["loader"])


def predict_dataset(heads: DepthHeads, hierarchy: Hierarchy, features: np.ndarray, batch: int = 1024) -> np.ndarray:
    """Fused teacher node distributions for a feature matrix."""
    rows = []
    for i in range(0, len(features), batch):
        x = features[i : i + batch].astype(np.float64)
        rows.append(fuse_batch(heads.teacher_forward_all(x), hierarchy))
    return np.concatenate(rows) if rows else np.zeros((0, hierarchy.n_nodes))


def save_checkpoint(trainer: Trainer, path) -> None:
    payload = pickle.dumps(trainer.state_dict(), protocol=4)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(payload)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return pickle.loads(fh.read())


# -- metrics CSV ------------------------------------------------------------------


def metrics_columns(n_depths: int) -> list[str]:
    cols = ["epoch", "method"]
    cols += [f"loss_labeled_d{d}" for d in range(1, n_depths + 1)]
    cols += [f"loss_unlabeled_d{d}" for d in range(1, n_depths + 1)]
    cols += ["spl_count", "gated_count", "coverage", "purity", "avg_depth", "bmhd_id", "bmhd_ood", "bmhd_mix"]
    return cols


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def metrics_row(report: EpochReport) -> list[str]:
    row = [str(report.epoch), report.method]
    row += [repr(float(v)) for v in report.loss_labeled]
    row += [repr(float(v)) for v in report.loss_unlabeled]
    row += [str(report.spl_total), str(report.gated_count)]
    row += [_fmt(report.coverage), _fmt(report.purity), _fmt(report.avg_depth)]
    row += [_fmt(report.bmhd_id), _fmt(report.bmhd_ood), _fmt(report.bmhd_mix)]
    return row


def run_training(
    config: TrainConfig,
    hierarchy: Hierarchy,
    dataset: FeatureDataset,
    out_dir=None,
    resume: dict | None = None,
    log_fn=None,
) -> tuple[list[EpochReport], Trainer]:
    """Train for config.epochs epochs, optionally writing artifacts to out_dir.

    `resume` takes a loaded checkpoint state; training continues from its
    epoch counter and reproduces the uninterrupted run exactly. The final
    epoch always evaluates on the test split, as do multiples of
    eval_every.
    """
    trainer = Trainer(config, hierarchy, dataset)
    if resume is not None:
        trainer.load_state_dict(resume)

    csv_fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(asdict(config), indent=2) + "\n")
        csv_fh = open(out / "metrics.csv", "w", encoding="utf-8", newline="")
        csv_fh.write(",".join(metrics_columns(len(trainer.depths))) + "\n")

    reports = []
    try:
        while trainer.epoch < config.epochs:
            report = trainer.run_epoch()
            is_final = trainer.epoch == config.epochs
            if is_final or (config.eval_every > 0 and trainer.epoch % config.eval_every == 0):
                report.bmhd_id, report.bmhd_ood, report.bmhd_mix = trainer.evaluate()
            reports.append(report)
            if csv_fh is not None:
                csv_fh.write(",".join(metrics_row(report)) + "\n")
                csv_fh.flush()
            if out_dir is not None and (
                is_final or (config.checkpoint_every > 0 and trainer.epoch % config.checkpoint_every == 0)
            ):
                save_checkpoint(trainer, Path(out_dir) / f"ckpt_epoch{trainer.epoch:04d}.bin")
            if log_fn is not None:
                log_fn(report)
    finally:
        if csv_fh is not None:
            csv_fh.close()
    return reports, trainer
