"""MLP models, parameter containers, Adam and checkpoint persistence."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from fedfew import autodiff as ad

MAGIC = b"FEDFEW1"


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int = 32
    hidden_dims: tuple[int, ...] = (64, 64)
    feature_dim: int = 64
    head_out_dim: int = 6
    simsiam_proj_dim: int = 64
    simsiam_pred_hidden: int = 32

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = [self.input_dim, *self.hidden_dims, self.feature_dim, self.head_out_dim,
                self.simsiam_proj_dim, self.simsiam_pred_hidden]
        if any(d < 1 for d in dims):
            raise ValueError(f"all model dims must be >= 1, got {dims}")

    @property
    def trunk_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.feature_dim]

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Segment names and shapes in canonical order."""
        out: list[tuple[str, tuple[int, ...]]] = []

        def linear(prefix, fan_in, fan_out):
            out.append((f"{prefix}.weight", (fan_in, fan_out)))
            out.append((f"{prefix}.bias", (fan_out,)))

        dims = self.trunk_dims
        for i in range(len(dims) - 1):
            linear(f"trunk.{i}", dims[i], dims[i + 1])
        linear("head", self.feature_dim, self.head_out_dim)
        linear("proj.0", self.feature_dim, self.simsiam_proj_dim)
        linear("proj.1", self.simsiam_proj_dim, self.simsiam_proj_dim)
        linear("pred.0", self.simsiam_proj_dim, self.simsiam_pred_hidden)
        linear("pred.1", self.simsiam_pred_hidden, self.simsiam_proj_dim)
        return out


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Ordered, named parameter segments. Arrays are read-only."""

    segments: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        for name, value in self.segments.items():
            arr = np.array(value, dtype=np.float64)
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "segments", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.segments[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.segments)

    def __len__(self) -> int:
        return len(self.segments)

    def items(self):
        return self.segments.items()

    def names(self) -> list[str]:
        return list(self.segments)

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self.segments.items()]

    def combinable(self, other: ParameterSet) -> bool:
        return self.shapes() == other.shapes()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterSet) or not self.combinable(other):
            return False
        return all(
            self[k].tobytes() == other[k].tobytes() for k in self.segments
        )

    def replace(self, **updates: np.ndarray) -> ParameterSet:
        segs = dict(self.segments)
        for k, v in updates.items():
            if k not in segs:
                raise KeyError(k)
            segs[k] = v
        return ParameterSet(segs)

    def with_segments(self, other: Mapping[str, np.ndarray]) -> ParameterSet:
        """Copy of self with same-named segments taken from ``other``."""
        segs = dict(self.segments)
        for k, v in other.items():
            if k in segs:
                if segs[k].shape != np.shape(v):
                    raise SpecMismatchError(f"segment {k}: shape {np.shape(v)} != {segs[k].shape}")
                segs[k] = v
        return ParameterSet(segs)

    def norm(self) -> float:
        return float(np.sqrt(np.sum([np.sum(v * v) for v in self.segments.values()])))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.segments.values()])


def init_params(spec: ModelSpec, seed: int) -> ParameterSet:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    segs = {}
    for name, shape in spec.layout():
        if name.endswith(".bias"):
            segs[name] = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            segs[name] = rng.uniform(-limit, limit, size=shape)
    return ParameterSet(segs)


def check_params(params: ParameterSet, spec: ModelSpec) -> None:
    if params.shapes() != spec.layout():
        raise SpecMismatchError("parameter set does not match model spec")


# -- forward passes on a tape ------------------------------------------------


def leaves(tape: ad.Tape, params: ParameterSet, trainable=None) -> dict[str, ad.Var]:
    """Put every segment on ``tape``; names outside ``trainable`` become constants."""
    out = {}
    for name, value in params.items():
        if trainable is None or any(name.startswith(p) for p in trainable):
            out[name] = tape.param(value)
        else:
            out[name] = tape.constant(value)
    return out


def _linear(p, prefix, x):
    return x @ p[f"{prefix}.weight"] + p[f"{prefix}.bias"]


def trunk(p: Mapping[str, ad.Var], spec: ModelSpec, x: ad.Var) -> ad.Var:
    h = x
    for i in range(len(spec.trunk_dims) - 1):
        h = ad.relu(_linear(p, f"trunk.{i}", h))
    return h


def head(p, h):
    return _linear(p, "head", h)


def projector(p, h):
    return _linear(p, "proj.1", ad.relu(_linear(p, "proj.0", h)))


def predictor(p, z):
    return _linear(p, "pred.1", ad.relu(_linear(p, "pred.0", z)))


def _check_input(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.input_dim:
        raise ad.ShapeError(f"input has {x.shape[-1]} features, model expects {spec.input_dim}")
    return x


def extract_features(params: ParameterSet, spec: ModelSpec, x) -> np.ndarray:
    """Trunk output g(x) for one sample or a batch (rows)."""
    x = _check_input(spec, x)
    tape = ad.Tape()
    p = leaves(tape, params, trainable=())
    return trunk(p, spec, tape.constant(x)).value


def classify_logits(params: ParameterSet, spec: ModelSpec, x) -> np.ndarray:
    x = _check_input(spec, x)
    tape = ad.Tape()
    p = leaves(tape, params, trainable=())
    return head(p, trunk(p, spec, tape.constant(x))).value


def simsiam_branches(p, spec: ModelSpec, view1: ad.Var, view2: ad.Var):
    z1 = projector(p, trunk(p, spec, view1))
    z2 = projector(p, trunk(p, spec, view2))
    return predictor(p, z1), z1, predictor(p, z2), z2


def simsiam_forward(params: ParameterSet, spec: ModelSpec, view1, view2):
    """(p1, z1, p2, z2) as arrays."""
    view1, view2 = _check_input(spec, view1), _check_input(spec, view2)
    tape = ad.Tape()
    p = leaves(tape, params, trainable=())
    out = simsiam_branches(p, spec, tape.constant(view1), tape.constant(view2))
    return tuple(v.value for v in out)


# -- optimizer ----------------------------------------------------------------


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """In-place update of ``params`` (a dict of writable arrays)."""
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- checkpoints --------------------------------------------------------------


def encode_checkpoint(params: ParameterSet) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(params))
    for name, value in params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", value.ndim)
        out += struct.pack(f"<{value.ndim}Q", *value.shape)
        out += value.astype("<f8").tobytes()
    return bytes(out)


def decode_checkpoint(blob: bytes) -> ParameterSet:
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError("checkpoint does not start with FEDFEW1")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedCheckpointError(
                f"checkpoint truncated: need {pos + n} bytes, file has {len(blob)}"
            )
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    segs = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims)
        if name in segs:
            raise CheckpointError(f"duplicate segment {name!r}")
        segs[name] = values.astype(np.float64)
    if pos != len(blob):
        raise TruncatedCheckpointError(
            f"checkpoint length {len(blob)} != header-implied length {pos}"
        )
    return ParameterSet(segs)


def save_checkpoint(params: ParameterSet, path) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path, spec: ModelSpec | None = None) -> ParameterSet:
    params = decode_checkpoint(Path(path).read_bytes())
    if spec is not None:
        check_params(params, spec)
    return params
