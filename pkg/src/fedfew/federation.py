"""Parameter-server simulation: FedAvg, local updates, and the training stages.

Clients never hand data to the server.  Everything that crosses the boundary
is one of the five message types below and goes through a :class:`Channel`,
which keeps a serialisable trace for auditing.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from fedfew import autodiff as ad
from fedfew import losses
from fedfew.data import AugConfig, ClassLayout, ClientDataset, encode_cc_label, make_views
from fedfew.inference import Prototype, compute_prototypes
from fedfew.losses import EnergyConfig
from fedfew.nn import Adam, ModelSpec, ParameterSet, decode_checkpoint, encode_checkpoint
from fedfew import nn

log = logging.getLogger(__name__)

STAGE_FSSL = "fssl"
STAGE_PSL = "psl"
STAGE_MLC = "mlc"
_STAGE_CODES = {STAGE_FSSL: 1, STAGE_PSL: 2, STAGE_MLC: 3}

_TRAINABLE = {
    STAGE_FSSL: ("trunk.", "proj.", "pred."),
    STAGE_PSL: ("trunk.", "head."),
    STAGE_MLC: ("trunk.", "head."),
}


class FederationError(RuntimeError):
    pass


class ChannelViolation(FederationError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 30
    warmup_rounds: int = 6
    local_epochs: int = 2
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    weight_rule: str = "labeled_counts"
    fssl_rounds: int = 10
    fssl_local_epochs: int = 2
    workers: int = 1
    mlc_unknown: str = "negative"

    def __post_init__(self):
        if self.rounds < 0 or not 0 <= self.warmup_rounds <= self.rounds:
            raise ValueError(
                f"need 0 <= warmup_rounds ({self.warmup_rounds}) <= rounds ({self.rounds})"
            )
        if self.batch_size < 1 or self.local_epochs < 0 or self.fssl_local_epochs < 0:
            raise ValueError("batch_size must be >= 1 and epoch counts >= 0")
        if self.weight_rule not in ("labeled_counts", "all_counts"):
            raise ValueError(f"unknown weight_rule {self.weight_rule!r}")
        if self.mlc_unknown not in ("negative", "mask"):
            raise ValueError(f"unknown mlc_unknown mode {self.mlc_unknown!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


# -- messages -----------------------------------------------------------------


@dataclass(frozen=True)
class ParamsDown:
    round: int
    params: ParameterSet


@dataclass(frozen=True)
class ParamsUp:
    client_id: int
    round: int
    params: ParameterSet
    sample_count: int


@dataclass(frozen=True)
class PrototypeMeta:
    client_id: int
    class_id: int
    mu_pos: tuple[float, ...]
    mu_neg: tuple[float, ...]
    n_pos: int
    n_neg: int


@dataclass(frozen=True)
class EnergyStats:
    client_id: int
    pairs: tuple[tuple[float, bool], ...]


@dataclass(frozen=True)
class Control:
    command: str
    stage: str


Message = Union[ParamsDown, ParamsUp, PrototypeMeta, EnergyStats, Control]
MESSAGE_TYPES = (ParamsDown, ParamsUp, PrototypeMeta, EnergyStats, Control)
CONTROL_COMMANDS = ("start", "stop", "stage")


def _params_payload(params: ParameterSet, full: bool) -> dict:
    blob = encode_checkpoint(params)
    out = {"digest": hashlib.sha256(blob).hexdigest(),
           "segments": [[k, list(s)] for k, s in params.shapes()]}
    if full:
        out["checkpoint"] = base64.b64encode(blob).decode("ascii")
    return out


def serialize(msg: Message, full_params: bool = False) -> dict:
    kind = type(msg).__name__
    if isinstance(msg, ParamsDown):
        body = {"round": msg.round, "params": _params_payload(msg.params, full_params)}
    elif isinstance(msg, ParamsUp):
        body = {"client_id": msg.client_id, "round": msg.round,
                "params": _params_payload(msg.params, full_params),
                "sample_count": msg.sample_count}
    elif isinstance(msg, PrototypeMeta):
        body = {"client_id": msg.client_id, "class_id": msg.class_id,
                "mu_pos": list(msg.mu_pos), "mu_neg": list(msg.mu_neg),
                "n_pos": msg.n_pos, "n_neg": msg.n_neg}
    elif isinstance(msg, EnergyStats):
        body = {"client_id": msg.client_id, "pairs": [[e, bool(f)] for e, f in msg.pairs]}
    elif isinstance(msg, Control):
        body = {"command": msg.command, "stage": msg.stage}
    else:
        raise ChannelViolation(f"{kind} is not part of the message schema")
    return {"type": kind, **body}


class Channel:
    """In-process PS <-> client link that type-checks and logs every message."""

    def __init__(self, record_payloads: bool = False):
        self.record_payloads = record_payloads
        self.trace: list[dict] = []
        self.counts: dict[str, int] = {}

    def send(self, msg: Message, sender: str, recipient: str) -> Message:
        if type(msg) not in MESSAGE_TYPES:
            raise ChannelViolation(f"{type(msg).__name__} is not part of the message schema")
        if isinstance(msg, (ParamsDown, ParamsUp)) and not isinstance(msg.params, ParameterSet):
            raise ChannelViolation("parameter messages must carry a ParameterSet")
        if isinstance(msg, Control) and msg.command not in CONTROL_COMMANDS:
            raise ChannelViolation(f"unknown control command {msg.command!r}")
        record = serialize(msg, self.record_payloads)
        record["from"], record["to"] = sender, recipient
        self.trace.append(record)
        kind = type(msg).__name__
        self.counts[kind] = self.counts.get(kind, 0) + 1
        return msg

    def dumps(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.trace)


def _numeric_lists(obj, path=""):
    if isinstance(obj, list):
        if obj and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
            yield path, obj
        for i, v in enumerate(obj):
            yield from _numeric_lists(v, f"{path}[{i}]")
    elif isinstance(obj, dict):
        for k, v in obj.items():
            yield from _numeric_lists(v, f"{path}.{k}")


def audit_trace(lines: Sequence[str] | str, input_dim: int, spec: ModelSpec | None = None,
                feature_dim: int | None = None) -> list[str]:
    """Return violations found in a serialized trace (empty list = clean).

    Checks the closed schema and that no payload array outside parameter
    blobs has ``input_dim`` entries.  Parameter blobs, when recorded, must
    decode to a parameter set with the model's layout.
    """
    if isinstance(lines, str):
        lines = [ln for ln in lines.splitlines() if ln.strip()]
    allowed = {t.__name__ for t in MESSAGE_TYPES}
    problems = []
    for i, line in enumerate(lines):
        rec = json.loads(line)
        kind = rec.get("type")
        if kind not in allowed:
            problems.append(f"message {i}: unknown type {kind!r}")
            continue
        body = {k: v for k, v in rec.items() if k not in ("type", "from", "to")}
        if "params" in body:
            payload = body.pop("params")
            if "checkpoint" in payload:
                ps = decode_checkpoint(base64.b64decode(payload["checkpoint"]))
                if spec is not None and ps.shapes() != spec.layout():
                    problems.append(f"message {i}: parameter blob does not match model layout")
            elif spec is not None and [(k, tuple(s)) for k, s in payload["segments"]] != spec.layout():
                problems.append(f"message {i}: parameter segments do not match model layout")
        if kind == "PrototypeMeta":
            for key in ("mu_pos", "mu_neg"):
                vec = body.pop(key)
                if feature_dim is not None and len(vec) != feature_dim:
                    problems.append(f"message {i}: {key} has {len(vec)} entries, expected {feature_dim}")
        if kind == "EnergyStats":
            if any(len(p) != 2 for p in body["pairs"]):
                problems.append(f"message {i}: energy pairs must be (energy, flag)")
        for path, arr in _numeric_lists(body):
            if len(arr) == input_dim:
                problems.append(f"message {i}: payload {path} has input_dim={input_dim} entries")
    return problems


# -- aggregation ----------------------------------------------------------------


def fedavg(param_sets: Sequence[ParameterSet], weights: Sequence[float]) -> ParameterSet:
    """Weighted average sum_k a_k theta_k with a_k = w_k / sum(w), reduced in list order."""
    if not param_sets:
        raise ValueError("fedavg needs at least one parameter set")
    if len(weights) != len(param_sets):
        raise ValueError("one weight per parameter set")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and >= 0")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights sum to zero")
    a = w / total
    first = param_sets[0]
    for ps in param_sets[1:]:
        if not first.combinable(ps):
            raise ValueError("parameter sets differ in segment names or shapes")
    if len(param_sets) == 1:
        return first
    out = {}
    for name in first:
        # segments every client left untouched (frozen layers, identical sets) pass through exactly
        if all(np.array_equal(first[name], ps[name]) for ps in param_sets[1:]):
            out[name] = first[name]
            continue
        acc = a[0] * first[name]
        for ak, ps in zip(a[1:], param_sets[1:]):
            acc = acc + ak * ps[name]
        out[name] = acc
    return ParameterSet(out)


def compute_weights(clients: Sequence[ClientDataset], stage: str,
                    rule: str = "labeled_counts") -> list[float]:
    """Normalized aggregation weights over the participating ``clients``."""
    if not clients:
        raise ValueError("no participating clients")
    if stage == STAGE_FSSL or rule == "all_counts":
        counts = [c.n_total for c in clients]
    else:
        counts = [c.n_labeled for c in clients]
    total = float(sum(counts))
    if total <= 0:
        raise ValueError("participating clients hold no samples")
    return [n / total for n in counts]


# -- local training ---------------------------------------------------------------


def client_rng(seed: int, stage: str, client_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STAGE_CODES[stage], client_id]))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def mlc_targets(y: np.ndarray, mode: str) -> np.ndarray:
    """Standard multi-label targets: unannotated entries become 0, or stay -1 under "mask"."""
    return np.where(y < 0, 0, y) if mode == "negative" else y


def _local_counts(y: np.ndarray):
    return (y == 1).sum(axis=0), (y == 0).sum(axis=0)


def _stage_loss(client, stage, spec, layout, cfg, aug, rng, idx, p, tape):
    if stage == STAGE_FSSL:
        x = client.all_features()[idx]
        v1, v2 = make_views(x, aug, rng)
        out = nn.simsiam_branches(p, spec, tape.constant(v1), tape.constant(v2))
        return losses.simsiam_loss(*out)
    x = client.labeled.x[idx]
    logits = nn.head(p, nn.trunk(p, spec, tape.constant(x)))
    if stage == STAGE_MLC:
        y = mlc_targets(client.labeled.y, cfg.mlc_unknown)
        pos, neg = _local_counts(y)
        return losses.weighted_bce(logits, y[idx], pos, neg)
    if is_uc_client(client, layout):
        return losses.uc_loss(logits, cfg.energy)
    y = encode_cc_label(client.labeled.y[idx], layout.cc_classes)
    return losses.total_cc_loss(logits, y, cfg.energy)


def is_uc_client(client: ClientDataset, layout: ClassLayout) -> bool:
    return len(client.annotated_classes) == 1 and client.annotated_classes[0] in layout.uc_classes


def stage_sample_count(client: ClientDataset, stage: str) -> int:
    return client.n_total if stage == STAGE_FSSL else client.n_labeled


def local_update(client: ClientDataset, params: ParameterSet, spec: ModelSpec, stage: str,
                 cfg: FederationConfig, rng: np.random.Generator, layout: ClassLayout | None = None,
                 aug: AugConfig | None = None, lr: float | None = None,
                 epochs: int | None = None) -> tuple[ParameterSet, float]:
    """Mini-batch Adam from ``params`` on the client's stage objective.

    Returns the new parameter set and the mean batch loss (nan if no step ran).
    The input set is never modified and optimizer state starts fresh.
    """
    if epochs is None:
        epochs = cfg.fssl_local_epochs if stage == STAGE_FSSL else cfg.local_epochs
    n = stage_sample_count(client, stage)
    if n == 0:
        raise FederationError(f"client {client.client_id} has no data for stage {stage}")
    if epochs == 0:
        return params, float("nan")
    if stage == STAGE_PSL and layout is None:
        raise ValueError("stage psl needs the class layout")
    aug = aug or AugConfig()
    prefixes = _TRAINABLE[stage]
    work = {k: np.array(v) for k, v in params.items()}
    opt = Adam(cfg.learning_rate if lr is None else lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    total, steps = 0.0, 0
    for _ in range(epochs):
        for idx in _batches(n, cfg.batch_size, rng):
            tape = ad.Tape()
            p = {k: (tape.param(v) if k.startswith(prefixes) else tape.constant(v))
                 for k, v in work.items()}
            loss = losses.batch_mean(_stage_loss(client, stage, spec, layout, cfg, aug, rng, idx, p, tape))
            trainable = {k: v for k, v in p.items() if k.startswith(prefixes)}
            opt.step(work, ad.gradients(loss, trainable))
            total += float(loss.value)
            steps += 1
    return ParameterSet(work), total / steps


# -- round loop ---------------------------------------------------------------------


@dataclass
class RoundState:
    round: int
    server_params: ParameterSet
    client_params: dict[int, ParameterSet]
    participants: tuple[int, ...]


@dataclass
class RoundRecord:
    round: int
    stage: str
    participants: list[int]
    weights: list[float]
    client_losses: dict[int, float]
    param_norm: float


class _ClientNode:
    def __init__(self, data: ClientDataset, seed: int, stage: str):
        self.data = data
        self.params: ParameterSet | None = None
        self.rng = client_rng(seed, stage, data.client_id)


class ParameterServer:
    """Runs synchronize / local update / aggregate rounds over client nodes."""

    def __init__(self, clients: Sequence[ClientDataset], spec: ModelSpec, cfg: FederationConfig,
                 seed: int, stage: str, channel: Channel | None = None,
                 layout: ClassLayout | None = None, aug: AugConfig | None = None):
        ids = [c.client_id for c in clients]
        if len(set(ids)) != len(ids):
            raise FederationError("duplicate client ids")
        self.nodes = {c.client_id: _ClientNode(c, seed, stage) for c in sorted(clients, key=lambda c: c.client_id)}
        self.spec, self.cfg, self.stage = spec, cfg, stage
        self.channel = channel or Channel()
        self.layout, self.aug = layout, aug
        self.history: list[RoundRecord] = []

    def _train(self, cid: int, t: int, lr: float | None):
        node = self.nodes[cid]
        new, loss = local_update(node.data, node.params, self.spec, self.stage, self.cfg,
                                 node.rng, self.layout, self.aug, lr=lr)
        msg = ParamsUp(cid, t, new, stage_sample_count(node.data, self.stage))
        return self.channel.send(msg, f"client-{cid}", "ps"), loss

    def run_round(self, t: int, params: ParameterSet, participants: Sequence[int],
                  weights: Sequence[float] | None = None,
                  lr_overrides: dict[int, float] | None = None,
                  observer: Callable[[RoundState], None] | None = None) -> ParameterSet:
        participants = sorted(participants)
        for cid in participants:
            msg = self.channel.send(ParamsDown(t, params), "ps", f"client-{cid}")
            self.nodes[cid].params = msg.params
        if observer is not None:
            observer(RoundState(t, params, {c: self.nodes[c].params for c in participants},
                                tuple(participants)))
        lr_overrides = lr_overrides or {}
        if self.cfg.workers > 1 and len(participants) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                futures = {c: pool.submit(self._train, c, t, lr_overrides.get(c)) for c in participants}
                results = {c: f.result() for c, f in futures.items()}
        else:
            results = {c: self._train(c, t, lr_overrides.get(c)) for c in participants}
        ups = [results[c][0] for c in participants]
        if weights is None:
            weights = compute_weights([self.nodes[c].data for c in participants], self.stage,
                                      self.cfg.weight_rule)
        new = fedavg([u.params for u in ups], weights)
        self.history.append(RoundRecord(t, self.stage, list(participants), list(map(float, weights)),
                                        {c: results[c][1] for c in participants}, new.norm()))
        return new


def run_fssl_stage(clients: Sequence[ClientDataset], params: ParameterSet, spec: ModelSpec,
                   cfg: FederationConfig, seed: int, aug: AugConfig | None = None,
                   channel: Channel | None = None, monitor_x: np.ndarray | None = None,
                   observer=None):
    """Federated SimSiam pre-training; returns (params, history, embedding_std per round)."""
    channel = channel or Channel()
    ps = ParameterServer(clients, spec, cfg, seed, STAGE_FSSL, channel, aug=aug or AugConfig())
    channel.send(Control("start", STAGE_FSSL), "ps", "all")
    ids = list(ps.nodes)
    stds = []
    for t in range(1, cfg.fssl_rounds + 1):
        params = ps.run_round(t, params, ids, observer=observer)
        if monitor_x is not None:
            stds.append(embedding_std(params, spec, monitor_x))
    channel.send(Control("stop", STAGE_FSSL), "ps", "all")
    if stds and stds[-1] <= 0.01:
        log.warning("embedding std %.4g after pre-training suggests collapse", stds[-1])
    return params, ps.history, stds


def embedding_std(params: ParameterSet, spec: ModelSpec, x: np.ndarray) -> float:
    """Mean per-dimension std of l2-normalized projector outputs (collapse monitor)."""
    tape = ad.Tape()
    p = nn.leaves(tape, params, trainable=())
    z = nn.projector(p, nn.trunk(p, spec, tape.constant(np.asarray(x, dtype=np.float64)))).value
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    z = z / np.where(norms == 0, 1.0, norms)
    return float(z.std(axis=0).mean())


@dataclass
class PslResult:
    params: ParameterSet
    warmup_params: ParameterSet
    history: list[RoundRecord]


def run_psl_stage(clients: Sequence[ClientDataset], params: ParameterSet, spec: ModelSpec,
                  layout: ClassLayout, cfg: FederationConfig, seed: int,
                  channel: Channel | None = None, observer=None,
                  lr_overrides: dict[int, float] | None = None,
                  weight_overrides: dict[int, float] | None = None) -> PslResult:
    """Energy-based partially supervised training with a common-class warm-up."""
    if params["head.weight"].shape[1] != layout.n_cc + 1:
        raise FederationError(
            f"head has {params['head.weight'].shape[1]} outputs, expected {layout.n_cc + 1}"
        )
    channel = channel or Channel()
    ps = ParameterServer(clients, spec, cfg, seed, STAGE_PSL, channel, layout=layout)
    cc_ids = [cid for cid, node in ps.nodes.items() if not is_uc_client(node.data, layout)]
    if not cc_ids:
        raise FederationError("no common-class clients")
    all_ids = list(ps.nodes)
    channel.send(Control("start", STAGE_PSL), "ps", "all")
    warm = params
    for t in range(1, cfg.rounds + 1):
        ids = cc_ids if t <= cfg.warmup_rounds else all_ids
        weights = None
        if weight_overrides is not None:
            weights = [weight_overrides.get(c, 0.0) for c in sorted(ids)]
        params = ps.run_round(t, params, ids, weights, lr_overrides, observer)
        if t == cfg.warmup_rounds:
            warm = params
    channel.send(Control("stop", STAGE_PSL), "ps", "all")
    return PslResult(params, warm, ps.history)


def run_mlc_stage(clients: Sequence[ClientDataset], params: ParameterSet, spec: ModelSpec,
                  cfg: FederationConfig, seed: int, channel: Channel | None = None) -> PslResult:
    """Baseline: FedAvg over all clients with class-balanced BCE on an all-class head."""
    channel = channel or Channel()
    ps = ParameterServer(clients, spec, cfg, seed, STAGE_MLC, channel)
    channel.send(Control("start", STAGE_MLC), "ps", "all")
    ids = list(ps.nodes)
    for t in range(1, cfg.rounds + 1):
        params = ps.run_round(t, params, ids)
    channel.send(Control("stop", STAGE_MLC), "ps", "all")
    return PslResult(params, params, ps.history)


# -- metadata ----------------------------------------------------------------------


def sample_energies(params: ParameterSet, spec: ModelSpec, x: np.ndarray, tau: float) -> np.ndarray:
    logits = nn.classify_logits(params, spec, x)
    return losses.joint_energy(logits, tau).value.reshape(-1)


def collect_metadata(clients: Sequence[ClientDataset], params: ParameterSet, spec: ModelSpec,
                     layout: ClassLayout, energy: EnergyConfig, channel: Channel | None = None):
    """Each client reports prototypes (UC clients) and per-sample energies."""
    channel = channel or Channel()
    protos: list[Prototype] = []
    stats: list[tuple[float, bool]] = []
    for client in sorted(clients, key=lambda c: c.client_id):
        lab = client.labeled
        if len(lab) == 0:
            continue
        e = sample_energies(params, spec, lab.x, energy.tau)
        if is_uc_client(client, layout):
            c = client.annotated_classes[0]
            flags = lab.y[:, c] == 1
            if not flags.any() or flags.all():
                raise FederationError(
                    f"client {client.client_id} needs both positives and negatives for class {c}"
                )
            feats = nn.extract_features(params, spec, lab.x)
            proto = compute_prototypes(feats[flags], feats[~flags], c)
            msg = PrototypeMeta(client.client_id, c, tuple(map(float, proto.mu_pos)),
                                tuple(map(float, proto.mu_neg)), proto.n_pos, proto.n_neg)
            channel.send(msg, f"client-{client.client_id}", "ps")
            protos.append(Prototype(msg.class_id, np.array(msg.mu_pos), np.array(msg.mu_neg),
                                    msg.n_pos, msg.n_neg))
        else:
            flags = np.zeros(len(lab), dtype=bool)
        msg = EnergyStats(client.client_id, tuple((float(a), bool(b)) for a, b in zip(e, flags)))
        channel.send(msg, f"client-{client.client_id}", "ps")
        stats.extend(msg.pairs)
    return protos, stats
