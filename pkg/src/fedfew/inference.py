"""Energy-gated detection of underrepresented classes and prototype matching."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fedfew import nn
from fedfew.losses import joint_energy

METRICS = ("cosine", "euclidean", "emd_sinkhorn")

SINKHORN_EPS = 0.05
SINKHORN_ITERS = 500
SINKHORN_TOL = 1e-9


class DistanceError(ValueError):
    pass


@dataclass(frozen=True)
class Prototype:
    class_id: int
    mu_pos: np.ndarray
    mu_neg: np.ndarray
    n_pos: int
    n_neg: int

    def __post_init__(self):
        if self.n_pos < 1 or self.n_neg < 1:
            raise ValueError("prototype counts must be >= 1")
        if not (np.all(np.isfinite(self.mu_pos)) and np.all(np.isfinite(self.mu_neg))):
            raise ValueError("prototype vectors must be finite")


def compute_prototypes(features_pos, features_neg, class_id: int) -> Prototype:
    features_pos = np.asarray(features_pos, dtype=np.float64)
    features_neg = np.asarray(features_neg, dtype=np.float64)
    if len(features_pos) == 0 or len(features_neg) == 0:
        raise ValueError(f"class {class_id}: prototypes need positive and negative examples")
    return Prototype(int(class_id), features_pos.mean(axis=0), features_neg.mean(axis=0),
                     len(features_pos), len(features_neg))


# -- threshold ------------------------------------------------------------------------


def _threshold_candidates(energies: np.ndarray) -> np.ndarray:
    distinct = np.unique(energies)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def _margins(cands: np.ndarray, energies: np.ndarray) -> np.ndarray:
    distinct = np.unique(energies)
    out = np.full(len(cands), np.inf)
    inner = np.isfinite(cands)
    # a midpoint sits halfway between its two neighbours
    out[inner] = (distinct[1:] - distinct[:-1]) / 2.0
    return out


def threshold_accuracy(energy_stats, threshold: float) -> int:
    e = np.array([p[0] for p in energy_stats], dtype=np.float64)
    f = np.array([p[1] for p in energy_stats], dtype=bool)
    return int(np.sum(f & (e > threshold)) + np.sum(~f & (e <= threshold)))


def select_threshold(energy_stats: Sequence[tuple[float, bool]]) -> float:
    """Energy cut maximizing correctly separated training examples.

    Candidates are -inf, +inf and midpoints between consecutive distinct
    energies.  Ties go to the candidate farthest from any energy, then to
    the smaller threshold.
    """
    e = np.array([p[0] for p in energy_stats], dtype=np.float64)
    f = np.array([p[1] for p in energy_stats], dtype=bool)
    if f.all() or not f.any():
        raise ValueError("energy stats need both UC and non-UC examples")
    if not np.all(np.isfinite(e)):
        raise ValueError("energies must be finite")
    cands = _threshold_candidates(e)
    order = np.argsort(e, kind="stable")
    e_sorted, f_sorted = e[order], f[order]
    # number of examples with energy <= candidate
    below = np.searchsorted(e_sorted, cands, side="right")
    neg_below = np.concatenate([[0], np.cumsum(~f_sorted)])[below]
    pos_below = np.concatenate([[0], np.cumsum(f_sorted)])[below]
    correct = neg_below + (f.sum() - pos_below)
    best = correct == correct.max()
    margins = _margins(cands, e)
    best &= margins == margins[best].max()
    return float(cands[np.flatnonzero(best)[0]])


def detect_uc(energy, threshold: float):
    """True where the energy exceeds the threshold (boundary counts as no UC)."""
    return np.asarray(energy) > threshold


# -- distances ---------------------------------------------------------------------------


def sinkhorn_cost(a: np.ndarray, b: np.ndarray, cost: np.ndarray, eps: float = SINKHORN_EPS,
                  max_iter: int = SINKHORN_ITERS, tol: float = SINKHORN_TOL) -> float:
    """Transport cost <P, C> of the entropic plan between histograms a and b."""
    kernel = np.exp(-cost / eps)
    u = np.ones_like(a)
    v = np.ones_like(b)
    for _ in range(max_iter):
        u = a / (kernel @ v)
        v = b / (kernel.T @ u)
        plan_rows = u * (kernel @ v)
        if np.abs(plan_rows - a).sum() < tol:
            break
    plan = u[:, None] * kernel * v[None, :]
    return float((plan * cost).sum())


def index_cost(d: int) -> np.ndarray:
    i = np.arange(d)
    return np.abs(i[:, None] - i[None, :]) / (d - 1)


def distance(u, v, metric: str = "cosine") -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DistanceError(f"dimension mismatch {u.shape} vs {v.shape}")
    if metric == "cosine":
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0 or nv == 0:
            raise DistanceError("cosine distance of a zero-norm vector")
        return float(max(0.0, 1.0 - (u @ v) / (nu * nv)))
    if metric == "euclidean":
        return float(np.linalg.norm(u - v))
    if metric == "emd_sinkhorn":
        if u.size < 2:
            raise DistanceError("earth mover's distance needs at least 2 dimensions")
        au, av = np.abs(u), np.abs(v)
        if au.sum() == 0 or av.sum() == 0:
            raise DistanceError("earth mover's distance of a zero-mass vector")
        a, b = au / au.sum(), av / av.sum()
        # the cost matrix is symmetric; a fixed argument order makes the iterate symmetric too
        if tuple(b) < tuple(a):
            a, b = b, a
        return sinkhorn_cost(a, b, index_cost(u.size))
    raise DistanceError(f"unknown metric {metric!r}")


def match_prototypes(feature, prototypes: Sequence[Prototype], metric: str = "cosine") -> bool:
    """Majority vote over prototype pairs; equidistant pairs and even splits vote positive."""
    if not prototypes:
        raise ValueError("no prototypes for class")
    pos_votes = 0
    for proto in prototypes:
        if distance(feature, proto.mu_pos, metric) <= distance(feature, proto.mu_neg, metric):
            pos_votes += 1
    return pos_votes >= len(prototypes) - pos_votes


# -- detector ----------------------------------------------------------------------------


@dataclass(frozen=True)
class UcDetector:
    threshold: float
    metric: str
    prototypes: tuple[Prototype, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if np.isnan(self.threshold):
            raise ValueError("threshold must not be NaN")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        object.__setattr__(self, "prototypes", tuple(self.prototypes))

    def for_class(self, c: int) -> list[Prototype]:
        return [p for p in self.prototypes if p.class_id == c]

    def classes(self) -> list[int]:
        return sorted({p.class_id for p in self.prototypes})

    def with_metric(self, metric: str) -> UcDetector:
        return UcDetector(self.threshold, metric, self.prototypes)


def fit_detector(energy_stats, prototypes: Sequence[Prototype], metric: str = "cosine") -> UcDetector:
    return UcDetector(select_threshold(energy_stats), metric, tuple(prototypes))


def dumps_detector(det: UcDetector) -> str:
    fmt = lambda x: "%.17g" % x  # noqa: E731
    lines = [f"threshold {fmt(det.threshold)}", f"metric {det.metric}",
             f"prototypes {len(det.prototypes)}"]
    for p in det.prototypes:
        lines.append(f"prototype {p.class_id} {p.n_pos} {p.n_neg} {p.mu_pos.size}")
        lines.append("pos " + " ".join(fmt(x) for x in p.mu_pos))
        lines.append("neg " + " ".join(fmt(x) for x in p.mu_neg))
    return "\n".join(lines) + "\n"


def loads_detector(text: str) -> UcDetector:
    lines = text.splitlines()
    try:
        threshold = float(lines[0].split()[1])
        metric = lines[1].split()[1]
        count = int(lines[2].split()[1])
        protos = []
        for i in range(count):
            head, pos, neg = lines[3 + 3 * i : 6 + 3 * i]
            _, cid, n_pos, n_neg, dim = head.split()
            mu_pos = np.array([float(x) for x in pos.split()[1:]])
            mu_neg = np.array([float(x) for x in neg.split()[1:]])
            if mu_pos.size != int(dim) or mu_neg.size != int(dim):
                raise ValueError("prototype vector length does not match header")
            protos.append(Prototype(int(cid), mu_pos, mu_neg, int(n_pos), int(n_neg)))
    except (IndexError, ValueError) as exc:
        raise ValueError(f"malformed detector file: {exc}") from None
    return UcDetector(threshold, metric, tuple(protos))


def save_detector(det: UcDetector, path) -> None:
    Path(path).write_text(dumps_detector(det), encoding="utf-8")


def load_detector(path) -> UcDetector:
    return loads_detector(Path(path).read_text(encoding="utf-8"))


# -- full prediction -----------------------------------------------------------------------


def assemble_predictions(logits: np.ndarray, features: np.ndarray, detector: UcDetector | None,
                         layout, tau: float = 1.0, cc_threshold: float = 0.5) -> np.ndarray:
    """C-column binary predictions from stage-two logits and trunk features.

    Column 0 of ``logits`` (the "no common class" indicator) is dropped; UC
    columns are filled only for samples whose joint energy passes the gate.
    ``detector=None`` gives the common-class-only classifier.
    """
    logits = np.atleast_2d(logits)
    features = np.atleast_2d(features)
    n = len(logits)
    out = np.zeros((n, layout.n_classes), dtype=np.int8)
    probs = 1.0 / (1.0 + np.exp(-logits[:, 1:]))
    out[:, list(layout.cc_classes)] = probs > cc_threshold
    if detector is None:
        return out
    energies = joint_energy(logits, tau).value.reshape(-1)
    gate = detect_uc(energies, detector.threshold)
    for i in np.flatnonzero(gate):
        for c in layout.uc_classes:
            protos = detector.for_class(c)
            if protos:
                out[i, c] = match_prototypes(features[i], protos, detector.metric)
    return out


def predict_full(x, params, spec, detector: UcDetector | None, layout, tau: float = 1.0,
                 cc_threshold: float = 0.5) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    logits = nn.classify_logits(params, spec, x)
    feats = nn.extract_features(params, spec, x)
    return assemble_predictions(logits, feats, detector, layout, tau, cc_threshold)
