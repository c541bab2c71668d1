"""End-to-end pipelines for FedFew and the comparison baselines."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from fedfew import federation as fl
from fedfew import inference, metrics, nn
from fedfew.data import AugConfig, Federation, SyntheticConfig
from fedfew.federation import Channel, FederationConfig
from fedfew.inference import UcDetector
from fedfew.nn import ModelSpec, ParameterSet

log = logging.getLogger(__name__)

METHODS = ("mlc_plain", "mlc_fssl", "nn_fssl", "nn_mlc_fssl", "fedfew_noebm", "fedfew_ebm")
PRIVACY_VIOLATING = ("nn_fssl", "nn_mlc_fssl")
DEFAULT_METHODS = ("mlc_plain", "mlc_fssl", "fedfew_noebm", "fedfew_ebm")


class PrivacyViolationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    model: ModelSpec | None = None
    metric: str = "cosine"
    cc_threshold: float = 0.5
    methods: tuple[str, ...] = DEFAULT_METHODS
    output_dir: str = "runs/default"
    seed: int = 0
    repeat: int = 3
    allow_privacy_violation: bool = False

    def __post_init__(self):
        if not self.methods:
            raise ValueError("method selector is empty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}")
        if self.metric not in inference.METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.repeat < 1:
            raise ValueError("repeat must be >= 1")

    def model_spec(self, head_out_dim: int | None = None) -> ModelSpec:
        base = self.model or ModelSpec(input_dim=self.data.input_dim)
        n_out = self.data.layout.n_cc + 1 if head_out_dim is None else head_out_dim
        return replace(base, input_dim=self.data.input_dim, head_out_dim=n_out)

    def run_seed(self, i: int) -> int:
        return self.seed + i


@dataclass
class MethodResult:
    method: str
    seed: int
    uc: dict[int, tuple[float, float, float, float]]
    cc_auroc: dict[int, float]
    extras: dict[str, float] = field(default_factory=dict)


# -- pipeline stages -------------------------------------------------------------


def pretrain(fed: Federation, cfg: ExperimentConfig, seed: int, channel: Channel | None = None):
    spec = cfg.model_spec()
    params = nn.init_params(spec, seed)
    params, history, stds = fl.run_fssl_stage(
        fed.clients, params, spec, cfg.federation, seed, cfg.aug, channel,
        monitor_x=fed.test.split.x,
    )
    return params, history, stds


def train_fedfew(fed: Federation, init: ParameterSet, cfg: ExperimentConfig, seed: int,
                 ebm: bool = True, channel: Channel | None = None) -> fl.PslResult:
    fcfg = cfg.federation
    if not ebm:
        fcfg = replace(fcfg, energy=replace(fcfg.energy, lam=0.0))
    return fl.run_psl_stage(fed.clients, init, cfg.model_spec(), fed.layout, fcfg, seed, channel)


def fit_fedfew_detector(fed: Federation, params: ParameterSet, cfg: ExperimentConfig,
                        channel: Channel | None = None) -> UcDetector:
    protos, stats = fl.collect_metadata(fed.clients, params, cfg.model_spec(), fed.layout,
                                        cfg.federation.energy, channel)
    return inference.fit_detector(stats, protos, cfg.metric)


def evaluate_predictions(fed: Federation, predict, cc_scores) -> tuple[dict, dict]:
    """Per-UC (A, P, R, F) on each UC's held-out block and per-CC AUROC on its block."""
    uc = {}
    for c in fed.layout.uc_classes:
        block = fed.test.for_class(c)
        pred = predict(block.x)[:, c]
        uc[c] = metrics.confusion_metrics(metrics.BinaryCounts.from_predictions(pred, block.y[:, c] == 1))
    cc = {}
    for c in fed.layout.cc_classes:
        block = fed.test.for_class(c)
        s = cc_scores(block.x)[:, c]
        truth = block.y[:, c] == 1
        cc[c] = metrics.auroc(s[truth], s[~truth])
    return uc, cc


def evaluate_fedfew(fed: Federation, params: ParameterSet, detector: UcDetector,
                    cfg: ExperimentConfig) -> tuple[dict, dict]:
    spec = cfg.model_spec()
    layout = fed.layout
    tau = cfg.federation.energy.tau

    def predict(x):
        return inference.predict_full(x, params, spec, detector, layout, tau, cfg.cc_threshold)

    def scores(x):
        logits = nn.classify_logits(params, spec, x)
        out = np.zeros((len(x), layout.n_classes))
        out[:, list(layout.cc_classes)] = 1.0 / (1.0 + np.exp(-logits[:, 1:]))
        return out

    return evaluate_predictions(fed, predict, scores)


def mlc_init(fed: Federation, cfg: ExperimentConfig, seed: int,
             pretrained: ParameterSet | None) -> ParameterSet:
    params = nn.init_params(cfg.model_spec(fed.layout.n_classes), seed)
    if pretrained is not None:
        keep = {k: v for k, v in pretrained.items() if not k.startswith("head.")}
        params = params.with_segments(keep)
    return params


def train_mlc(fed: Federation, init: ParameterSet, cfg: ExperimentConfig, seed: int,
              channel: Channel | None = None) -> fl.PslResult:
    spec = cfg.model_spec(fed.layout.n_classes)
    return fl.run_mlc_stage(fed.clients, init, spec, cfg.federation, seed, channel)


def evaluate_mlc(fed: Federation, params: ParameterSet, cfg: ExperimentConfig):
    spec = cfg.model_spec(fed.layout.n_classes)

    def scores(x):
        return 1.0 / (1.0 + np.exp(-nn.classify_logits(params, spec, x)))

    def predict(x):
        return (scores(x) > cfg.cc_threshold).astype(np.int8)

    return evaluate_predictions(fed, predict, scores)


def evaluate_nn(fed: Federation, params: ParameterSet, spec: ModelSpec, metric: str):
    """Local 1-nearest-neighbour over each UC client's labeled features.

    Needs per-sample features of client data at prediction time, which the
    federation forbids; only usable as a comparator.
    """
    refs = {}
    for client in fed.uc_clients:
        c = client.annotated_classes[0]
        refs[c] = (nn.extract_features(params, spec, client.labeled.x), client.labeled.y[:, c] == 1)
    uc = {}
    for c in fed.layout.uc_classes:
        block = fed.test.for_class(c)
        feats = nn.extract_features(params, spec, block.x)
        ref_x, ref_y = refs[c]
        pred = np.array([ref_y[np.argmin([_safe_distance(f, r, metric) for r in ref_x])]
                         for f in feats])
        uc[c] = metrics.confusion_metrics(metrics.BinaryCounts.from_predictions(pred, block.y[:, c] == 1))
    return uc


def _safe_distance(u, v, metric):
    try:
        return inference.distance(u, v, metric)
    except inference.DistanceError:
        return np.inf


def energy_gaps(fed: Federation, result: fl.PslResult, cfg: ExperimentConfig) -> tuple[float, float]:
    """(pre, post) gap between UC-positive and UC-negative energies on UC clients' labeled data."""
    spec = cfg.model_spec()
    tau = cfg.federation.energy.tau
    out = []
    for params in (result.warmup_params, result.params):
        es, flags = [], []
        for client in fed.uc_clients:
            c = client.annotated_classes[0]
            es.append(fl.sample_energies(params, spec, client.labeled.x, tau))
            flags.append(client.labeled.y[:, c] == 1)
        out.append(metrics.energy_gap(np.concatenate(es), np.concatenate(flags)))
    return out[0], out[1]


# -- comparison -------------------------------------------------------------------


def run_seed(fed: Federation, cfg: ExperimentConfig, seed: int,
             methods: tuple[str, ...] | None = None,
             metrics_for: tuple[str, ...] | None = None) -> list[MethodResult]:
    """All selected methods for one seed; pre-training is shared between methods."""
    methods = methods or cfg.methods
    bad = [m for m in methods if m in PRIVACY_VIOLATING]
    if bad and not cfg.allow_privacy_violation:
        raise PrivacyViolationError(
            f"{bad} read raw client features; pass --allow-privacy-violation to run them"
        )
    metric_list = metrics_for or (cfg.metric,)
    results = []
    cache: dict[str, object] = {}

    def pretrained():
        if "fssl" not in cache:
            cache["fssl"] = pretrain(fed, cfg, seed)[0]
        return cache["fssl"]

    def mlc(with_fssl: bool):
        key = f"mlc_{with_fssl}"
        if key not in cache:
            init = mlc_init(fed, cfg, seed, pretrained() if with_fssl else None)
            cache[key] = train_mlc(fed, init, cfg, seed).params
        return cache[key]

    for method in methods:
        if method in ("mlc_plain", "mlc_fssl"):
            params = mlc(method == "mlc_fssl")
            uc, cc = evaluate_mlc(fed, params, cfg)
            results.append(MethodResult(method, seed, uc, cc))
        elif method in ("nn_fssl", "nn_mlc_fssl"):
            if method == "nn_fssl":
                params, spec = pretrained(), cfg.model_spec()
            else:
                params, spec = mlc(True), cfg.model_spec(fed.layout.n_classes)
            uc = evaluate_nn(fed, params, spec, cfg.metric)
            results.append(MethodResult(method, seed, uc, {}))
        else:
            res = train_fedfew(fed, pretrained(), cfg, seed, ebm=method == "fedfew_ebm")
            det = fit_fedfew_detector(fed, res.params, cfg)
            pre, post = energy_gaps(fed, res, cfg)
            for metric in metric_list:
                uc, cc = evaluate_fedfew(fed, res.params, det.with_metric(metric), cfg)
                name = method if metric == cfg.metric and len(metric_list) == 1 else f"{method}[{metric}]"
                results.append(MethodResult(name, seed, uc, cc, {
                    "threshold": det.threshold, "gap_pre": pre, "gap_post": post}))
    return results


def summarize(results: list[MethodResult]) -> dict[str, dict]:
    """Seed means per method: uc[c] -> (A, P, R, F), cc[c] -> AUROC."""
    out: dict[str, dict] = {}
    for name in dict.fromkeys(r.method for r in results):
        rows = [r for r in results if r.method == name]
        uc = {c: tuple(float(np.mean([r.uc[c][i] for r in rows])) for i in range(4))
              for c in rows[0].uc}
        cc = {c: float(np.mean([r.cc_auroc[c] for r in rows])) for c in rows[0].cc_auroc}
        out[name] = {"uc": uc, "cc": cc, "cc_mean": float(np.mean(list(cc.values()))) if cc else float("nan")}
    return out
