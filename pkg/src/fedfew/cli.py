"""Command line entry point: config parsing, staged runs and report emission.

Every subcommand reads one INI-style config (sections data, federation,
energy, inference, experiment), applies ``--section.key=value`` overrides
and writes its artifacts plus a JSON manifest into the output directory.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
import types
import typing
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from fedfew import data as fd
from fedfew import experiments as ex
from fedfew import federation as fl
from fedfew import inference, metrics, nn
from fedfew.losses import EnergyConfig

log = logging.getLogger("fedfew")

SECTIONS = ("data", "federation", "energy", "inference", "experiment")

ALIASES = {
    "data": {"C": "n_classes", "K": "n_clients", "C_u": "uc_classes"},
    "federation": {"T": "rounds", "T_w": "warmup_rounds", "E": "local_epochs", "lr": "learning_rate"},
    "energy": {"lambda": "lam"},
}

MODEL_KEYS = ("hidden_dims", "feature_dim", "simsiam_proj_dim", "simsiam_pred_hidden")
AUG_KEYS = {"aug_sigma": "sigma", "aug_dropout": "dropout"}


class CliError(Exception):
    exit_code = 1


class ConfigError(CliError):
    exit_code = 2

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class UnknownKeyError(ConfigError):
    pass


class ConfigTypeError(ConfigError):
    pass


class ConstraintError(ConfigError):
    pass


class PrerequisiteError(CliError):
    exit_code = 3

    def __init__(self, artifact: Path, subcommand: str):
        super().__init__(f"missing {artifact}; run `fedfew {subcommand}` first")
        self.subcommand = subcommand


class OutputNotWritableError(CliError):
    exit_code = 4


# -- config ----------------------------------------------------------------------


def _hints(cls) -> dict[str, object]:
    return typing.get_type_hints(cls)


def _section_fields(section: str) -> dict[str, object]:
    """Accepted keys of a section mapped to their type hints."""
    if section == "data":
        out = {k: v for k, v in _hints(fd.SyntheticConfig).items()}
        aug = _hints(fd.AugConfig)
        out.update({k: aug[f] for k, f in AUG_KEYS.items()})
        return out
    if section == "federation":
        return {k: v for k, v in _hints(fl.FederationConfig).items() if k != "energy"}
    if section == "energy":
        return _hints(EnergyConfig)
    if section == "inference":
        return {"metric": str, "cc_threshold": float}
    model = _hints(nn.ModelSpec)
    out = {"methods": tuple[str, ...], "output_dir": str, "seed": int, "repeat": int,
           "allow_privacy_violation": bool}
    out.update({k: model[k] for k in MODEL_KEYS})
    return out


def _coerce(key: str, raw: str, hint) -> object:
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if origin is tuple:
            inner = args[0]
            items = [s for s in raw.replace(",", " ").split() if s]
            return tuple(_coerce(key, s, inner) for s in items)
        if origin in (typing.Union, types.UnionType):
            if type(None) in args and raw.lower() in ("", "none"):
                return None
            inner = next(a for a in args if a is not type(None))
            return _coerce(key, raw, inner)
    except ConfigTypeError:
        raise
    except ValueError:
        raise ConfigTypeError(key, f"cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigTypeError(key, f"unsupported type {hint}")


def _canonical(section: str, key: str) -> str:
    return ALIASES.get(section, {}).get(key, key)


def _read_entries(path, overrides) -> list[tuple[str, str, str, str]]:
    """(section, canonical key, written name, raw value) from file then overrides."""
    entries = []
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise CliError(f"config file {path} not found") from None
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(path), f"malformed config: {exc}") from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise UnknownKeyError(section, f"unknown section (expected one of {', '.join(SECTIONS)})")
            for key, value in parser.items(section):
                entries.append((section, _canonical(section, key), f"{section}.{key}", value))
    for item in overrides or ():
        name, sep, value = item.partition("=")
        section, dot, key = name.partition(".")
        if not sep or not dot:
            raise ConfigError(item, "overrides look like section.key=value")
        if section not in SECTIONS:
            raise UnknownKeyError(name, "unknown section")
        entries.append((section, _canonical(section, key), name, value))
    return entries


def _build(section: str, cls, values: dict, written: dict[str, str], base=None):
    try:
        return replace(base, **values) if base is not None else cls(**values)
    except ValueError as exc:
        raise ConstraintError(_blame(str(exc), written, section), str(exc)) from None


def _blame(msg: str, written: dict[str, str], fallback: str) -> str:
    """The user-written key a constraint message most likely refers to."""
    named = [w for k, w in written.items() if k in msg]
    if named:
        return named[-1]
    return next(reversed(written.values()), fallback)


def parse_config(path=None, overrides=None) -> ex.ExperimentConfig:
    """Resolve a config file plus ``section.key=value`` overrides (later wins)."""
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    written: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    for section, key, name, raw in _read_entries(path, overrides):
        fields = _section_fields(section)
        if key not in fields:
            raise UnknownKeyError(name, "unknown key")
        values[section][key] = _coerce(name, raw, fields[key])
        written[section][key] = name

    dv = dict(values["data"])
    aug_values = {AUG_KEYS[k]: dv.pop(k) for k in list(dv) if k in AUG_KEYS}
    data_cfg = _build("data", fd.SyntheticConfig, dv, written["data"])
    try:
        data_cfg.validate()
    except fd.InfeasibleConfigError as exc:
        raise ConstraintError(_blame(str(exc), written["data"], "data"), str(exc)) from None
    aug_scale = {"sigma": 0.1 * data_cfg.signal_scale}
    aug_cfg = _build("data", fd.AugConfig, {**aug_scale, **aug_values}, written["data"])
    energy = _build("energy", EnergyConfig, values["energy"], written["energy"])
    fed_cfg = _build("federation", fl.FederationConfig, {**values["federation"], "energy": energy},
                     written["federation"])

    xv = dict(values["experiment"])
    model_values = {k: xv.pop(k) for k in list(xv) if k in MODEL_KEYS}
    model = nn.ModelSpec(**model_values) if model_values else None
    xv.update(values["inference"])
    merged_written = {**written["experiment"], **written["inference"]}
    return _build("experiment", ex.ExperimentConfig,
                  {"data": data_cfg, "federation": fed_cfg, "aug": aug_cfg, "model": model, **xv},
                  merged_written)


def config_echo(cfg: ex.ExperimentConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["model"] = dataclasses.asdict(cfg.model_spec())
    return out


# -- artifacts ---------------------------------------------------------------------


@dataclass
class RunDir:
    root: Path

    def __post_init__(self):
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OutputNotWritableError(f"cannot create output dir {self.root}: {exc}") from None
        if not os.access(self.root, os.W_OK):
            raise OutputNotWritableError(f"output dir {self.root} is not writable")

    @property
    def data(self) -> Path:
        return self.root / "data"

    def path(self, name: str) -> Path:
        return self.root / name

    def need(self, name: str, subcommand: str) -> Path:
        p = self.root / name
        if not p.exists():
            raise PrerequisiteError(p, subcommand)
        return p

    def load_data(self) -> fd.Federation:
        if not (self.data / "test.csv").exists():
            raise PrerequisiteError(self.data / "test.csv", "gen-data")
        return fd.load_dataset(self.data)


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_text(path: Path, text: str) -> Path:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OutputNotWritableError(f"cannot write {path}: {exc}") from None
    return path


def _round_log(history) -> list[dict]:
    return [{"stage": r.stage, "round": r.round, "participants": r.participants,
             "weights": r.weights, "losses": {str(k): v for k, v in sorted(r.client_losses.items())},
             "param_norm": r.param_norm} for r in history]


def write_manifest(run: RunDir, command: str, cfg: ex.ExperimentConfig, outputs, inputs=(),
                   rounds=(), channel: fl.Channel | None = None, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "config": config_echo(cfg),
        "seed": cfg.seed,
        "inputs": {p.name: sha256_file(p) for p in inputs},
        "artifacts": {p.name: sha256_file(p) for p in outputs},
        "rounds": list(rounds),
        "messages": dict(sorted((channel.counts if channel else {}).items())),
    }
    if extra:
        manifest.update(extra)
    text = json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n"
    return _write_text(run.path(f"manifest_{command}.json"), text)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"{type(obj).__name__} is not serializable")


def _write_trace(run: RunDir, command: str, channel: fl.Channel) -> Path:
    return _write_text(run.path(f"trace_{command}.jsonl"), channel.dumps() + "\n")


def _data_files(run: RunDir) -> list[Path]:
    return sorted(run.data.glob("*.csv"))


# -- report tables -----------------------------------------------------------------------

COMPARE_COLUMNS = ["method", "class", "kind", "A", "P", "R", "F", "AUROC"]


def _fmt(x) -> str:
    return "" if x is None else "%.6f" % x


def result_rows(name: str, uc: dict, cc: dict) -> list[list[str]]:
    rows = []
    for c in sorted(uc):
        rows.append([name, str(c), "UC", *(_fmt(v) for v in uc[c]), ""])
    for c in sorted(cc):
        rows.append([name, str(c), "CC", "", "", "", "", _fmt(cc[c])])
    return rows


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def format_table(summary: dict[str, dict]) -> str:
    lines = []
    for name, s in summary.items():
        uc = "  ".join(f"c{c} A={a:.2f} P={p:.2f} R={r:.2f} F={f:.2f}"
                       for c, (a, p, r, f) in sorted(s["uc"].items()))
        auc = "" if not s["cc"] else f"  CC AUROC={s['cc_mean']:.4f}"
        lines.append(f"{name:28s} {uc}{auc}")
    return "\n".join(lines)


# -- subcommands ----------------------------------------------------------------------------


def cmd_gen_data(cfg, run: RunDir, args) -> int:
    fed = fd.generate_synthetic(cfg.data)
    files = fd.save_dataset(fed, run.data)
    write_manifest(run, "gen-data", cfg, files)
    print(f"wrote {len(files)} dataset files to {run.data}")
    return 0


def cmd_pretrain(cfg, run: RunDir, args) -> int:
    fed = run.load_data()
    channel = fl.Channel()
    params, history, stds = ex.pretrain(fed, cfg, cfg.seed, channel)
    out = run.path("pretrain.ckpt")
    nn.save_checkpoint(params, out)
    trace = _write_trace(run, "pretrain", channel)
    write_manifest(run, "pretrain", cfg, [out, trace], _data_files(run), _round_log(history), channel,
                   {"embedding_std": stds})
    print(f"pre-trained {cfg.federation.fssl_rounds} rounds; embedding std {stds[-1] if stds else float('nan'):.4f}")
    return 0


def _method_name(cfg) -> str:
    return "fedfew_ebm" if cfg.federation.energy.lam > 0 else "fedfew_noebm"


def cmd_train(cfg, run: RunDir, args) -> int:
    init_path = run.need("pretrain.ckpt", "pretrain")
    fed = run.load_data()
    spec = cfg.model_spec()
    init = nn.load_checkpoint(init_path, spec)
    channel = fl.Channel()
    res = fl.run_psl_stage(fed.clients, init, spec, fed.layout, cfg.federation, cfg.seed, channel)
    final, warm = run.path("train.ckpt"), run.path("warmup.ckpt")
    nn.save_checkpoint(res.params, final)
    nn.save_checkpoint(res.warmup_params, warm)
    trace = _write_trace(run, "train", channel)
    write_manifest(run, "train", cfg, [final, warm, trace], [init_path, *_data_files(run)],
                   _round_log(res.history), channel)
    print(f"trained {cfg.federation.rounds} rounds ({cfg.federation.warmup_rounds} warm-up) -> {final}")
    return 0


def cmd_fit_detector(cfg, run: RunDir, args) -> int:
    ckpt = run.need("train.ckpt", "train")
    fed = run.load_data()
    params = nn.load_checkpoint(ckpt, cfg.model_spec())
    channel = fl.Channel()
    det = ex.fit_fedfew_detector(fed, params, cfg, channel)
    out = run.path("detector.txt")
    inference.save_detector(det, out)
    trace = _write_trace(run, "fit-detector", channel)
    write_manifest(run, "fit-detector", cfg, [out, trace], [ckpt], channel=channel,
                   extra={"threshold": det.threshold})
    print(f"energy threshold {det.threshold:.6g}; {len(det.prototypes)} prototype pairs")
    return 0


def cmd_eval(cfg, run: RunDir, args) -> int:
    ckpt = run.need("train.ckpt", "train")
    det_path = run.need("detector.txt", "fit-detector")
    fed = run.load_data()
    params = nn.load_checkpoint(ckpt, cfg.model_spec())
    det = inference.load_detector(det_path)
    if args.metric:
        det = det.with_metric(args.metric[0])
    uc, cc = ex.evaluate_fedfew(fed, params, det, cfg)
    out = run.path("metrics.csv")
    _write_text(out, csv_text(COMPARE_COLUMNS, result_rows(_method_name(cfg), uc, cc)))
    write_manifest(run, "eval", cfg, [out], [ckpt, det_path])
    print(format_table({_method_name(cfg): {"uc": uc, "cc": cc,
                                            "cc_mean": float(np.mean(list(cc.values())))}}))
    return 0


def cmd_energy_report(cfg, run: RunDir, args) -> int:
    warm_path = run.need("warmup.ckpt", "train")
    final_path = run.need("train.ckpt", "train")
    fed = run.load_data()
    spec = cfg.model_spec()
    tau = cfg.federation.energy.tau
    rows, gaps = [], {}
    for phase, path in (("pre", warm_path), ("post", final_path)):
        params = nn.load_checkpoint(path, spec)
        es, flags = [], []
        for client in fed.uc_clients:
            c = client.annotated_classes[0]
            has_uc = client.labeled.y[:, c] == 1
            rep = metrics.report_for_params(client.labeled, has_uc, params, spec, tau,
                                            f"client_{client.client_id}", phase)
            rows.extend(rep.rows)
            es.extend(r[1] for r in rep.rows)
            flags.extend(r[2] for r in rep.rows)
        gaps[phase] = metrics.energy_gap(es, flags)
    report = metrics.EnergyReport(rows, gaps["post"] - gaps["pre"])
    out = run.path("energy_report.csv")
    _write_text(out, report.to_csv())
    write_manifest(run, "energy-report", cfg, [out], [warm_path, final_path], extra={"gap": gaps})
    print(f"energy gap pre {gaps['pre']:.4f} post {gaps['post']:.4f}")
    return 0


def cmd_compare(cfg, run: RunDir, args) -> int:
    metrics_for = tuple(args.metric) if args.metric else (cfg.metric,)
    for m in metrics_for:
        if m not in inference.METRICS:
            raise ConfigError("--metric", f"unknown metric {m!r}")
    if args.allow_privacy_violation:
        cfg = replace(cfg, allow_privacy_violation=True)
    fed = fd.generate_synthetic(cfg.data)
    results: list[ex.MethodResult] = []
    outputs = []
    gaps = {}
    for i in range(cfg.repeat):
        seed = cfg.run_seed(i)
        seed_results = ex.run_seed(fed, cfg, seed, cfg.methods, metrics_for)
        rows = []
        for r in seed_results:
            rows.extend(result_rows(r.method, r.uc, r.cc_auroc))
            if "gap_pre" in r.extras:
                gaps.setdefault(r.method, []).append([seed, r.extras["gap_pre"], r.extras["gap_post"]])
        p = run.path(f"compare_seed{seed}.csv")
        _write_text(p, csv_text(COMPARE_COLUMNS, rows))
        outputs.append(p)
        results.extend(seed_results)
    summary = ex.summarize(results)
    rows = []
    for name, s in summary.items():
        rows.extend(result_rows(name, s["uc"], s["cc"]))
    out = run.path("compare_summary.csv")
    _write_text(out, csv_text(COMPARE_COLUMNS, rows))
    write_manifest(run, "compare", cfg, [out, *outputs],
                   extra={"seeds": [cfg.run_seed(i) for i in range(cfg.repeat)],
                          "metrics": list(metrics_for), "energy_gaps": gaps})
    print(format_table(summary))
    return 0


def cmd_probe(cfg, run: RunDir, args) -> int:
    ckpt = run.need("pretrain.ckpt", "pretrain")
    spec = cfg.model_spec()
    pretrained = nn.load_checkpoint(ckpt, spec)
    tx, ty, vx, vy = fd.probe_dataset(cfg.data, seed=cfg.seed + 1)
    rows = []
    for name, params in (("pretrained", pretrained), ("random_init", nn.init_params(spec, cfg.seed))):
        res = metrics.linear_probe(params, spec, tx, ty, vx, vy, epochs=args.epochs, seed=cfg.seed)
        rows.append([name, "%.6f" % res.accuracy, "%.6g" % res.trunk_grad_norm])
        print(f"{name:12s} probe accuracy {res.accuracy:.4f}")
    out = run.path("probe.csv")
    _write_text(out, csv_text(["trunk", "accuracy", "trunk_grad_norm"], rows))
    write_manifest(run, "probe", cfg, [out], [ckpt])
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "write the synthetic federation as CSV files"),
    "pretrain": (cmd_pretrain, "federated self-supervised pre-training"),
    "train": (cmd_train, "energy-based partially supervised training"),
    "fit-detector": (cmd_fit_detector, "collect metadata, pick threshold and prototypes"),
    "eval": (cmd_eval, "per-class metrics of the trained model"),
    "energy-report": (cmd_energy_report, "energies before and after the energy-based rounds"),
    "compare": (cmd_compare, "run selected methods over repeated seeds"),
    "probe": (cmd_probe, "linear probe on frozen pre-trained features"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedfew", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", help="INI config file (defaults apply when omitted)")
        p.add_argument("-o", "--out", help="output directory (overrides experiment.output_dir)")
        if name in ("compare", "eval"):
            p.add_argument("--metric", action="append", choices=inference.METRICS,
                           help="prototype distance; repeat to compare several")
        if name == "compare":
            p.add_argument("--allow-privacy-violation", action="store_true",
                           help="permit the nearest-neighbour baselines that read raw client data")
        if name == "probe":
            p.add_argument("--epochs", type=int, default=200)
    return ap


def split_overrides(argv):
    """Separate ``--section.key=value`` (or ``--section.key value``) tokens."""
    rest, overrides = [], []
    it = iter(argv)
    for tok in it:
        if tok.startswith("--") and "." in tok.split("=", 1)[0]:
            body = tok[2:]
            if "=" not in body:
                body = f"{body}={next(it, '')}"
            overrides.append(body)
        else:
            rest.append(tok)
    return rest, overrides


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    rest, overrides = split_overrides(argv)
    args = build_parser().parse_args(rest)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, overrides)
        if args.out:
            cfg = replace(cfg, output_dir=args.out)
        run = RunDir(Path(cfg.output_dir))
        return COMMANDS[args.command][0](cfg, run, args)
    except (CliError, ex.PrivacyViolationError, nn.CheckpointError, fd.DatasetFormatError,
            fl.FederationError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 1)


if __name__ == "__main__":
    sys.exit(main())
