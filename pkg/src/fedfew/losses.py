"""Training objectives built on the autodiff tape.

Per-sample losses return a vector over the batch (or a scalar for a single
sample); callers average with :func:`batch_mean` before differentiating.
Logits carry the "no common class" indicator in column 0 followed by one
column per common class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedfew import autodiff as ad


class LabelEncodingError(ValueError):
    pass


@dataclass(frozen=True)
class EnergyConfig:
    tau: float = 1.0
    lam: float = 0.01
    m_c: float = -5.0
    m_u: float = -25.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


def _var(x) -> ad.Var:
    return x if isinstance(x, ad.Var) else ad.constant(x)


def check_encoded(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    rows = labels.reshape(-1, labels.shape[-1])
    if not np.isin(rows, (0.0, 1.0)).all():
        raise LabelEncodingError("encoded labels must be binary")
    none_flag = rows[:, 0] == 1.0
    any_cc = rows[:, 1:].sum(axis=1) > 0
    if np.any(none_flag == any_cc):
        bad = int(np.flatnonzero(none_flag == any_cc)[0])
        raise LabelEncodingError(
            f"row {bad}: bit 0 must be 1 exactly when all common-class bits are 0"
        )
    return labels


def bce_partial(logits, labels) -> ad.Var:
    """Binary cross-entropy over the indicator plus common-class columns.

    Uses log sigma(l) = -softplus(-l) so the sum reduces to
    softplus(l) - y * l, which is overflow-free.
    """
    logits = _var(logits)
    y = check_encoded(labels)
    per_entry = ad.softplus(logits) - logits * logits.tape.constant(y)
    return ad.sum(per_entry, axis=-1)


def weighted_bce(logits, labels, pos_count, neg_count) -> ad.Var:
    """Class-balanced BCE; ``labels`` uses -1 for unknown entries, which are masked."""
    logits = _var(logits)
    tape = logits.tape
    labels = np.asarray(labels, dtype=np.float64)
    pos = np.maximum(np.asarray(pos_count, dtype=np.float64), 1.0)
    neg = np.maximum(np.asarray(neg_count, dtype=np.float64), 1.0)
    w_pos = neg / (pos + neg)
    w_neg = pos / (pos + neg)
    known = labels >= 0
    y = np.where(known, labels, 0.0)
    pos_coef = tape.constant(np.where(known, y * w_pos, 0.0))
    neg_coef = tape.constant(np.where(known, (1.0 - y) * w_neg, 0.0))
    # -log sigma(l) = softplus(-l), -log(1 - sigma(l)) = softplus(l)
    per_entry = pos_coef * ad.softplus(-logits) + neg_coef * ad.softplus(logits)
    return ad.sum(per_entry, axis=-1)


def class_energy(logits, tau: float = 1.0) -> ad.Var:
    if not tau > 0:
        raise ValueError("tau must be > 0")
    logits = _var(logits)
    return ad.scale(ad.softplus(ad.scale(logits, 1.0 / tau)), -tau)


def joint_energy(logits, tau: float = 1.0) -> ad.Var:
    return ad.sum(class_energy(logits, tau), axis=-1)


def hinge_cc(energy, cfg: EnergyConfig) -> ad.Var:
    energy = _var(energy)
    gap = ad.relu(energy - energy.tape.constant(cfg.m_c))
    return ad.scale(ad.square(gap), cfg.lam)


def hinge_uc(energy, cfg: EnergyConfig) -> ad.Var:
    energy = _var(energy)
    gap = ad.relu(energy.tape.constant(cfg.m_u) - energy)
    return ad.scale(ad.square(gap), cfg.lam)


def total_cc_loss(logits, labels, cfg: EnergyConfig) -> ad.Var:
    logits = _var(logits)
    return bce_partial(logits, labels) + hinge_cc(joint_energy(logits, cfg.tau), cfg)


def uc_loss(logits, cfg: EnergyConfig) -> ad.Var:
    return hinge_uc(joint_energy(logits, cfg.tau), cfg)


def _neg_cosine(p: ad.Var, z: ad.Var) -> ad.Var:
    return -ad.sum(ad.l2_normalize(p) * ad.l2_normalize(z), axis=-1)


def simsiam_loss(p1, z1, p2, z2, stop_gradient: bool = True) -> ad.Var:
    """Symmetric negative cosine similarity, z branches detached.

    ``stop_gradient=False`` exists only so tests can show the detach matters.
    """
    tape = next((v.tape for v in (p1, z1, p2, z2) if isinstance(v, ad.Var)), None) or ad.Tape()
    p1, z1, p2, z2 = (v if isinstance(v, ad.Var) else tape.constant(v) for v in (p1, z1, p2, z2))
    if not (p1.shape == z1.shape == p2.shape == z2.shape):
        raise ad.ShapeError("simsiam_loss: all inputs must share a shape")
    if stop_gradient:
        z1, z2 = ad.stop_gradient(z1), ad.stop_gradient(z2)
    return ad.scale(_neg_cosine(p1, z2) + _neg_cosine(p2, z1), 0.5)


def batch_mean(per_sample: ad.Var) -> ad.Var:
    return ad.mean(per_sample) if per_sample.value.ndim else per_sample
