"""Synthetic partially labeled federations, label encoding, views and CSV I/O.

Labels are stored as int8 with -1 meaning "not annotated at this client".
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

UNKNOWN = -1


class InfeasibleConfigError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


class MissingAnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class ClassLayout:
    n_classes: int
    uc_classes: tuple[int, ...]

    @property
    def cc_classes(self) -> tuple[int, ...]:
        return tuple(c for c in range(self.n_classes) if c not in self.uc_classes)

    @property
    def n_cc(self) -> int:
        return self.n_classes - len(self.uc_classes)


@dataclass(frozen=True)
class Sample:
    sample_id: int
    features: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class Split:
    """A block of samples stored row-wise."""

    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(int(self.ids[i]), self.x[i], self.y[i])

    @classmethod
    def empty(cls, input_dim: int, n_classes: int) -> Split:
        return cls(np.zeros(0, np.int64), np.zeros((0, input_dim)), np.zeros((0, n_classes), np.int8))

    def take(self, mask) -> Split:
        return Split(self.ids[mask], self.x[mask], self.y[mask])


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    annotated_classes: tuple[int, ...]
    labeled: Split
    unlabeled: Split

    @property
    def n_labeled(self) -> int:
        return len(self.labeled)

    @property
    def n_unlabeled(self) -> int:
        return len(self.unlabeled)

    @property
    def n_total(self) -> int:
        return self.n_labeled + self.n_unlabeled

    def all_features(self) -> np.ndarray:
        return np.concatenate([self.labeled.x, self.unlabeled.x])


@dataclass(frozen=True)
class TestSet:
    """Held-out samples; ``group[i]`` is the class whose 100+100 block row i belongs to."""

    split: Split
    group: np.ndarray

    def for_class(self, c: int) -> Split:
        return self.split.take(self.group == c)


@dataclass(frozen=True)
class Federation:
    layout: ClassLayout
    clients: tuple[ClientDataset, ...]
    test: TestSet

    @property
    def cc_clients(self) -> list[ClientDataset]:
        cc = set(self.layout.cc_classes)
        return [c for c in self.clients if set(c.annotated_classes) == cc]

    @property
    def uc_clients(self) -> list[ClientDataset]:
        uc = set(self.layout.uc_classes)
        return [
            c for c in self.clients
            if len(c.annotated_classes) == 1 and c.annotated_classes[0] in uc
        ]


@dataclass(frozen=True)
class SyntheticConfig:
    n_classes: int = 8
    uc_classes: tuple[int, ...] = (5, 6, 7)
    n_clients: int = 6
    input_dim: int = 32
    cc_labeled: int = 500
    cc_unlabeled: int = 500
    uc_pos: int = 10
    uc_neg: int = 90
    uc_unlabeled: int = 0
    uc_unlabeled_prevalence: float = 0.1
    cc_prevalence: tuple[float, ...] = (0.05,)
    noise_sigma: float = 0.3
    signal_scale: float = 3.0
    uc_overlap: float = 0.8
    test_pos: int = 100
    test_neg: int = 100
    uc_ratio_limit: float = 0.2
    inject_uc_in_cc: float = 0.0
    imbalance_ratio: float | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "uc_classes", tuple(int(c) for c in self.uc_classes))
        object.__setattr__(self, "cc_prevalence", tuple(float(p) for p in self.cc_prevalence))

    @property
    def layout(self) -> ClassLayout:
        return ClassLayout(self.n_classes, self.uc_classes)

    def prevalence(self) -> np.ndarray:
        n_cc = self.layout.n_cc
        p = self.cc_prevalence
        if len(p) == 1:
            p = p * n_cc
        if len(p) != n_cc:
            raise InfeasibleConfigError(
                f"cc_prevalence needs 1 or {n_cc} entries, got {len(p)}"
            )
        return np.array(p)

    def validate(self) -> None:
        uc = self.uc_classes
        if len(set(uc)) != len(uc) or any(not 0 <= c < self.n_classes for c in uc):
            raise InfeasibleConfigError(f"uc_classes {uc} invalid for {self.n_classes} classes")
        if self.imbalance_ratio is None:
            if not len(uc) < self.n_clients:
                raise InfeasibleConfigError("need fewer underrepresented classes than clients")
            if self.n_clients - len(uc) < 1:
                raise InfeasibleConfigError("need at least one common-class client")
        prev = self.prevalence()
        if np.any((prev < 0) | (prev >= 1)):
            raise InfeasibleConfigError("cc_prevalence entries must lie in [0, 1)")
        if self.test_pos > 0 and np.any(prev == 0):
            raise InfeasibleConfigError(
                "a common class has prevalence 0 but test positives are requested"
            )
        if self.uc_pos < 1 or self.uc_neg < 1:
            raise InfeasibleConfigError("each UC client needs >= 1 positive and >= 1 negative")
        if self.cc_labeled < 1:
            raise InfeasibleConfigError("common-class clients need labeled samples")
        if self.uc_pos / self.cc_labeled > self.uc_ratio_limit:
            raise InfeasibleConfigError(
                f"UC positives / CC labeled = {self.uc_pos / self.cc_labeled:.3f} "
                f"exceeds uc_ratio_limit {self.uc_ratio_limit}"
            )
        if not 0 <= self.uc_unlabeled_prevalence < 1 or not 0 <= self.inject_uc_in_cc < 1:
            raise InfeasibleConfigError("UC prevalences must lie in [0, 1)")
        if not 0 <= self.uc_overlap < 1:
            raise InfeasibleConfigError("uc_overlap must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise InfeasibleConfigError("noise_sigma must be >= 0")


class _Builder:
    def __init__(self, cfg: SyntheticConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        d = cfg.input_dim
        v = self.rng.standard_normal((cfg.n_classes, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        cc = list(cfg.layout.cc_classes)
        if cfg.uc_overlap > 0 and len(cc) >= 2:
            # each UC direction leans on two common-class directions
            for j, u in enumerate(cfg.layout.uc_classes):
                shared = v[cc[j % len(cc)]] + v[cc[(j + 1) % len(cc)]]
                shared /= np.linalg.norm(shared)
                mixed = cfg.uc_overlap * shared + np.sqrt(1 - cfg.uc_overlap**2) * v[u]
                v[u] = mixed / np.linalg.norm(mixed)
        self.directions = v
        self.next_id = 0
        self.cc = np.array(cfg.layout.cc_classes, dtype=int)
        self.prev = cfg.prevalence()

    def labels(self, n: int, forced: dict[int, int] | None = None, uc_rate: float = 0.0,
               uc_pool: Sequence[int] = ()) -> np.ndarray:
        y = np.zeros((n, self.cfg.n_classes), dtype=np.int8)
        y[:, self.cc] = self.rng.random((n, len(self.cc))) < self.prev
        for c in uc_pool:
            y[:, c] = self.rng.random(n) < uc_rate
        for c, val in (forced or {}).items():
            y[:, c] = val
        return y

    def features(self, y: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        signal = cfg.signal_scale * (y.astype(np.float64) @ self.directions)
        return signal + cfg.noise_sigma * self.rng.standard_normal((len(y), cfg.input_dim))

    def block(self, y: np.ndarray, keep: Sequence[int] | None) -> Split:
        x = self.features(y)
        ids = np.arange(self.next_id, self.next_id + len(y), dtype=np.int64)
        self.next_id += len(y)
        stored = np.full_like(y, UNKNOWN)
        if keep is not None:
            keep = list(keep)
            stored[:, keep] = y[:, keep]
        return Split(ids, x, stored)


def generate_synthetic(cfg: SyntheticConfig) -> Federation:
    """Generate the client datasets and held-out test set for ``cfg``."""
    cfg.validate()
    if cfg.imbalance_ratio is not None:
        return _two_client_study(cfg)
    b = _Builder(cfg)
    layout = cfg.layout
    cc_list = list(layout.cc_classes)
    clients = []
    n_cc_clients = cfg.n_clients - len(layout.uc_classes)
    for k in range(n_cc_clients):
        pool = layout.uc_classes if cfg.inject_uc_in_cc > 0 else ()
        y_l = b.labels(cfg.cc_labeled, uc_rate=cfg.inject_uc_in_cc, uc_pool=pool)
        labeled = b.block(y_l, keep=cc_list)
        y_u = b.labels(cfg.cc_unlabeled, uc_rate=cfg.inject_uc_in_cc, uc_pool=pool)
        unlabeled = b.block(y_u, keep=None)
        clients.append(ClientDataset(k, tuple(cc_list), labeled, unlabeled))
    for j, c in enumerate(layout.uc_classes):
        k = n_cc_clients + j
        y = np.concatenate([b.labels(cfg.uc_pos, {c: 1}), b.labels(cfg.uc_neg, {c: 0})])
        order = b.rng.permutation(len(y))
        labeled = b.block(y[order], keep=[c])
        y_u = b.labels(cfg.uc_unlabeled, uc_rate=cfg.uc_unlabeled_prevalence, uc_pool=[c])
        unlabeled = b.block(y_u, keep=None)
        clients.append(ClientDataset(k, (c,), labeled, unlabeled))
    test = _test_set(b, cfg)
    return Federation(layout, tuple(clients), test)


def _test_set(b: _Builder, cfg: SyntheticConfig) -> TestSet:
    blocks, groups = [], []
    uc = list(cfg.layout.uc_classes)
    for c in range(cfg.n_classes):
        clear_uc = {u: 0 for u in uc}
        pos = b.labels(cfg.test_pos, {**clear_uc, c: 1})
        neg = b.labels(cfg.test_neg, {**clear_uc, c: 0})
        y = np.concatenate([pos, neg])
        blocks.append(b.block(y, keep=range(cfg.n_classes)))
        groups.append(np.full(len(y), c, dtype=np.int64))
    split = Split(
        np.concatenate([s.ids for s in blocks]),
        np.concatenate([s.x for s in blocks]),
        np.concatenate([s.y for s in blocks]),
    )
    return TestSet(split, np.concatenate(groups))


def _two_client_study(cfg: SyntheticConfig) -> Federation:
    """Two clients: n healthy images, and r * n images each carrying some class."""
    b = _Builder(cfg)
    n = cfg.cc_labeled + cfg.cc_unlabeled
    healthy = b.block(np.zeros((n, cfg.n_classes), dtype=np.int8), keep=None)
    m = int(round(cfg.imbalance_ratio * n))
    y = b.labels(m)
    empty = np.flatnonzero(y.sum(axis=1) == 0)
    y[empty, b.rng.integers(0, cfg.n_classes, size=len(empty))] = 1
    diseased = b.block(y, keep=None)
    empty_split = Split.empty(cfg.input_dim, cfg.n_classes)
    clients = (
        ClientDataset(0, (), empty_split, healthy),
        ClientDataset(1, (), empty_split, diseased),
    )
    return Federation(cfg.layout, clients, _test_set(b, cfg))


def probe_dataset(cfg: SyntheticConfig, n_per_class: int = 200, seed: int | None = None):
    """Three mutually exclusive classes (none / class a / class b) split in halves.

    Directions come from the same generator as ``cfg`` so a trunk pre-trained
    on that federation can be probed.  Returns (x_train, y_train, x_test, y_test)
    with integer class targets.
    """
    b = _Builder(cfg)
    rng = np.random.default_rng(cfg.seed + 1 if seed is None else seed)
    a, c = cfg.layout.uc_classes[:2] if len(cfg.uc_classes) >= 2 else (0, 1)
    xs, ts = [], []
    for target, direction in ((0, None), (1, a), (2, c)):
        noise = cfg.noise_sigma * rng.standard_normal((n_per_class, cfg.input_dim))
        signal = 0.0 if direction is None else cfg.signal_scale * b.directions[direction]
        xs.append(signal + noise)
        ts.append(np.full(n_per_class, target))
    train_x, train_y, test_x, test_y = [], [], [], []
    for x, t in zip(xs, ts):
        order = rng.permutation(len(x))
        half = len(x) // 2
        train_x.append(x[order[:half]])
        train_y.append(t[:half])
        test_x.append(x[order[half:]])
        test_y.append(t[half:])
    return (np.concatenate(train_x), np.concatenate(train_y),
            np.concatenate(test_x), np.concatenate(test_y))


def encode_cc_label(labels: np.ndarray, cc_classes: Sequence[int]) -> np.ndarray:
    """(C_c + 1)-bit encoding: bit 0 flags "no common class", bits 1.. the classes."""
    labels = np.asarray(labels)
    cc = labels[..., list(cc_classes)]
    if np.any(cc == UNKNOWN):
        raise MissingAnnotationError("sample is missing a common-class annotation")
    none = (cc.sum(axis=-1) == 0).astype(np.float64)
    return np.concatenate([none[..., None], cc.astype(np.float64)], axis=-1)


@dataclass(frozen=True)
class AugConfig:
    sigma: float = 0.3
    dropout: float = 0.2

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("augmentation sigma must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("augmentation dropout must lie in [0, 1)")


def make_views(x: np.ndarray, aug: AugConfig, rng: np.random.Generator):
    """Two independent noisy, coordinate-dropped copies of ``x`` (sample or batch)."""
    x = np.asarray(x, dtype=np.float64)

    def view():
        v = x + aug.sigma * rng.standard_normal(x.shape) if aug.sigma > 0 else x.copy()
        if aug.dropout > 0:
            v = np.where(rng.random(x.shape) < aug.dropout, 0.0, v)
        return v

    return view(), view()


# -- CSV persistence -----------------------------------------------------------


def _header(d: int, c: int) -> list[str]:
    return ["client_id", "split", *(f"feat_{i}" for i in range(d)), *(f"label_{j}" for j in range(c))]


def _rows(key, split_name: str, s: Split):
    for i in range(len(s)):
        yield [str(key), split_name,
               *("%.17g" % v for v in s.x[i]),
               *(str(int(v)) for v in s.y[i])]


def save_dataset(fed: Federation, path) -> list[Path]:
    """One CSV per client plus ``test.csv``; test rows store their group in client_id."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    d = fed.test.split.x.shape[1]
    c = fed.layout.n_classes
    written = []
    files = [(f"client_{cl.client_id}.csv",
              [_rows(cl.client_id, "labeled", cl.labeled), _rows(cl.client_id, "unlabeled", cl.unlabeled)])
             for cl in fed.clients]
    test_rows = []
    for g in np.unique(fed.test.group):
        test_rows.append(_rows(int(g), "test", fed.test.split.take(fed.test.group == g)))
    files.append(("test.csv", test_rows))
    for name, parts in files:
        p = root / name
        with p.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(_header(d, c))
            for rows in parts:
                w.writerows(rows)
        written.append(p)
    return written


def _read_csv(p: Path):
    with p.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["client_id", "split"]:
            raise DatasetFormatError(f"{p.name}: missing or bad header")
        d = sum(h.startswith("feat_") for h in header)
        c = sum(h.startswith("label_") for h in header)
        if header != _header(d, c):
            raise DatasetFormatError(f"{p.name}: bad header")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2 + d + c:
                raise DatasetFormatError(f"{p.name} line {lineno}: expected {2 + d + c} fields")
            try:
                key = int(row[0])
                x = [float(v) for v in row[2 : 2 + d]]
                y = [int(v) for v in row[2 + d :]]
            except ValueError as exc:
                raise DatasetFormatError(f"{p.name} line {lineno}: {exc}") from None
            if row[1] not in ("labeled", "unlabeled", "test"):
                raise DatasetFormatError(f"{p.name} line {lineno}: unknown split {row[1]!r}")
            if any(v not in (0, 1, UNKNOWN) for v in y):
                raise DatasetFormatError(f"{p.name} line {lineno}: label outside {{0, 1, -1}}")
            rows.append((lineno, key, row[1], x, y))
    return d, c, rows


def load_dataset(path) -> Federation:
    root = Path(path)
    client_files = sorted(root.glob("client_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
    test_file = root / "test.csv"
    if not client_files or not test_file.exists():
        raise FileNotFoundError(f"no dataset under {root}")
    next_id = 0

    def split_of(rows, d, c):
        nonlocal next_id
        if not rows:
            return Split.empty(d, c)
        ids = np.arange(next_id, next_id + len(rows), dtype=np.int64)
        next_id += len(rows)
        return Split(ids, np.array([r[3] for r in rows], dtype=np.float64).reshape(len(rows), d),
                     np.array([r[4] for r in rows], dtype=np.int8).reshape(len(rows), c))

    clients = []
    dims = None
    for p in client_files:
        d, c, rows = _read_csv(p)
        dims = dims or (d, c)
        if (d, c) != dims:
            raise DatasetFormatError(f"{p.name}: column counts differ from other clients")
        lab = [r for r in rows if r[2] == "labeled"]
        unl = [r for r in rows if r[2] == "unlabeled"]
        if len(lab) + len(unl) != len(rows):
            raise DatasetFormatError(f"{p.name}: test rows in a client file")
        annotated = ()
        if lab:
            annotated = tuple(j for j, v in enumerate(lab[0][4]) if v != UNKNOWN)
            for lineno, *_, y in lab:
                if tuple(j for j, v in enumerate(y) if v != UNKNOWN) != annotated:
                    raise DatasetFormatError(
                        f"{p.name} line {lineno}: inconsistent annotation mask"
                    )
        cid = int(p.stem.split("_")[1])
        clients.append(ClientDataset(cid, annotated, split_of(lab, d, c), split_of(unl, d, c)))
    d, c, rows = _read_csv(test_file)
    test = TestSet(split_of(rows, d, c), np.array([r[1] for r in rows], dtype=np.int64))
    cc_set = set()
    uc = []
    for cl in clients:
        if len(cl.annotated_classes) == 1:
            uc.append(cl.annotated_classes[0])
        elif cl.annotated_classes:
            cc_set = set(cl.annotated_classes)
    uc_classes = tuple(uc) if cc_set else ()
    return Federation(ClassLayout(c, uc_classes), tuple(clients), test)
