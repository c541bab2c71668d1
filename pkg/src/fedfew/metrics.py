"""Confusion metrics, rank-based AUROC, energy reports and the linear probe."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from fedfew import autodiff as ad
from fedfew import losses, nn


@dataclass(frozen=True)
class BinaryCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, pred, truth) -> BinaryCounts:
        pred = np.asarray(pred, dtype=bool)
        truth = np.asarray(truth, dtype=bool)
        return cls(int(np.sum(pred & truth)), int(np.sum(pred & ~truth)),
                   int(np.sum(~pred & ~truth)), int(np.sum(~pred & truth)))


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def confusion_metrics(counts: BinaryCounts) -> tuple[float, float, float, float]:
    """(accuracy, precision, recall, f1); zero denominators give 0."""
    if counts.total <= 0:
        raise ValueError("no evaluated samples")
    acc = (counts.tp + counts.tn) / counts.total
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    return acc, precision, recall, f1_score(precision, recall)


def f1_score(precision: float, recall: float) -> float:
    return _ratio(2.0 * precision * recall, precision + recall)


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    _, first, counts = np.unique(sorted_vals, return_index=True, return_counts=True)
    # tied block starting at position s with k members shares rank s + (k + 1) / 2
    block_rank = first + (counts + 1) / 2.0
    ranks = np.empty(len(values))
    ranks[order] = np.repeat(block_rank, counts)
    return ranks


def auroc(scores_pos, scores_neg) -> float:
    """Mann-Whitney estimate: P(pos > neg) + 0.5 P(tie)."""
    pos = np.asarray(scores_pos, dtype=np.float64).reshape(-1)
    neg = np.asarray(scores_neg, dtype=np.float64).reshape(-1)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc needs positive and negative scores")
    ranks = _midranks(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


@dataclass
class EnergyReport:
    rows: list[tuple[int, float, bool, str, str]]
    gap: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "energy", "has_uc", "split", "phase"])
        for sid, e, flag, split, phase in self.rows:
            w.writerow([sid, "%.17g" % e, int(flag), split, phase])
        return buf.getvalue()


def energy_gap(energies, has_uc) -> float:
    e = np.asarray(energies, dtype=np.float64)
    f = np.asarray(has_uc, dtype=bool)
    if f.all() or not f.any():
        raise ValueError("energy gap needs both groups")
    return float(e[f].mean() - e[~f].mean())


def energy_report(ids, energies, has_uc, split: str, phase: str) -> EnergyReport:
    rows = [(int(i), float(e), bool(f), split, phase) for i, e, f in zip(ids, energies, has_uc)]
    return EnergyReport(rows, energy_gap(energies, has_uc))


def report_for_params(split, has_uc, params, spec, tau: float, split_name: str, phase: str):
    logits = nn.classify_logits(params, spec, split.x)
    e = losses.joint_energy(logits, tau).value.reshape(-1)
    return energy_report(split.ids, e, has_uc, split_name, phase)


@dataclass
class ProbeResult:
    accuracy: float
    trunk_grad_norm: float


def linear_probe(params: nn.ParameterSet, spec: nn.ModelSpec, train_x, train_y, test_x, test_y,
                 epochs: int = 200, seed: int = 0, lr: float = 1e-2,
                 batch_size: int = 64) -> ProbeResult:
    """Train a fresh one-vs-rest linear head on frozen trunk features.

    Trunk parameters sit on the tape as differentiable leaves behind a
    stop-gradient, so ``trunk_grad_norm`` (max over steps) verifies they
    received nothing.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=int)
    if len(train_x) == 0 or len(test_x) == 0:
        raise ValueError("empty probe set")
    n_cls = int(max(train_y.max(), np.max(test_y))) + 1
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (spec.feature_dim + n_cls))
    work = {"w": rng.uniform(-limit, limit, (spec.feature_dim, n_cls)), "b": np.zeros(n_cls)}
    targets = np.eye(n_cls)[train_y]
    trunk_names = [k for k in params if k.startswith("trunk.")]
    opt = nn.Adam(lr)
    worst = 0.0
    for _ in range(epochs):
        order = rng.permutation(len(train_x))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            tape = ad.Tape()
            p = {k: tape.param(params[k]) for k in trunk_names}
            head = {k: tape.param(v) for k, v in work.items()}
            feats = ad.stop_gradient(nn.trunk(p, spec, tape.constant(train_x[idx])))
            logits = feats @ head["w"] + head["b"]
            y = tape.constant(targets[idx])
            loss = ad.mean(ad.sum(ad.softplus(logits) - logits * y, axis=-1))
            grads = ad.gradients(loss, {**p, **head})
            worst = max(worst, max(float(np.linalg.norm(grads[k])) for k in trunk_names))
            opt.step(work, {"w": grads["w"], "b": grads["b"]})
    feats = nn.extract_features(params, spec, test_x)
    pred = np.argmax(feats @ work["w"] + work["b"], axis=1)
    return ProbeResult(float(np.mean(pred == np.asarray(test_y))), worst)
