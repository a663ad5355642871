"""Command-line driver: gen-data, train-source, adapt, evaluate, report, sweep-k.

Every command works inside one run directory (``--out``)::

    config.json          resolved config
    data/                manifest.json + <split>.jsonl
    source_model.json    loss_curve.csv
    adapted_model.json   trace.csv  [pseudo_labels.jsonl]
    report.json          scores.csv

Exit codes: 0 success, 1 unexpected failure, 2 bad config or usage,
3 undefined metric (single-class evaluation data), 4 unreadable input file.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .adaptation import adapt_stream
from .experiments import (ExperimentConfig, dump_json, evaluate_stage, generate_data, inference_scores,
                          label_noise_hook, mean, train_source_stage)
from .metrics import UndefinedMetricError
from .model import Batch, ModelLoadError, load_model, save_model
from .numerics import ContractError, RngStream
from .pseudolabel import dump_records
from .synthdata import DatasetLoadError, MissingPattern, apply_missing, read_dataset, write_dataset

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_METRIC, EXIT_INPUT = 0, 1, 2, 3, 4
SEED_ENV = "MFAS_SEED"
DEFAULT_KS = (1, 2, 5, 10, 20)


class ConfigError(ContractError):
    pass


# -------------------------------------------------------------------- config


def _coerce(name: str, raw: str, current):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true or false, got {raw!r}")
    elif isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {raw!r}")
    elif isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {raw!r}")
        value = float(value)
    elif isinstance(current, str):
        value = raw
    return value


def resolve_config(args, env=None) -> ExperimentConfig:
    """Defaults, then the --config file, then MFAS_SEED (if the file has no seed), then flags."""
    env = os.environ if env is None else env
    values = {}
    if getattr(args, "config", None):
        try:
            values = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"config: cannot read {args.config} ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: {args.config} is not valid JSON ({exc.msg})") from None
        if not isinstance(values, dict):
            raise ConfigError("config: top level must be a JSON object")
    try:
        cfg = ExperimentConfig.from_dict(values)
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from None

    changes = {}
    if "seed" not in values and env.get(SEED_ENV):
        changes["seed"] = _coerce("seed", env[SEED_ENV], 0)
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"{key}: --set expects key=value")
        if key not in {f.name for f in dataclasses.fields(ExperimentConfig)}:
            raise ConfigError(f"{key}: unknown config field")
        changes[key] = _coerce(key, raw, getattr(cfg, key))
    for flag, field_name in (("seed", "seed"), ("missing", "missing"), ("pseudo", "pseudo"),
                             ("strategy", "strategy"), ("k", "k"), ("threshold_mode", "threshold_mode"),
                             ("out", "out_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[field_name] = value
    if changes.get("strategy") == "naive":
        changes["strategy"] = "plain"
    if changes.get("seed", 0) < 0:
        raise ConfigError("seed: must be a non-negative integer")
    return cfg.replace(**changes)


def _run_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_config(cfg: ExperimentConfig, out: Path):
    dump_json(cfg.to_dict(), out / "config.json")


def _load_data(cfg: ExperimentConfig, out: Path, data_dir=None):
    data = read_dataset(data_dir or out / "data")
    if cfg.missing != "none":
        data.splits["target"] = apply_missing(data.splits["target"], cfg.missing)
        data.missing["target"] = MissingPattern.parse(cfg.missing).value
    return data


# ------------------------------------------------------------------ commands


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    out = _run_dir(cfg)
    data = generate_data(cfg)
    write_dataset(out / "data", data)
    _save_config(cfg, out)
    counts = data.manifest()["counts"]
    print(f"wrote {out / 'data'}: " + ", ".join(f"{k} {sum(v.values())}" for k, v in counts.items()))
    return EXIT_OK


def write_loss_curve(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(curve):
            w.writerow([epoch, format(loss, ".17g")])


def cmd_train_source(cfg: ExperimentConfig, args) -> int:
    out = _run_dir(cfg)
    data = _load_data(cfg, out, args.data)
    model, curve = train_source_stage(cfg, data)
    save_model(model, out / "source_model.json")
    write_loss_curve(curve, out / "loss_curve.csv")
    _save_config(cfg, out)
    print(f"source loss {curve[0]:.4f} -> {curve[-1]:.4f} over {len(curve) - 1} epochs")
    return EXIT_OK


def cmd_adapt(cfg: ExperimentConfig, args) -> int:
    out = _run_dir(cfg)
    data = _load_data(cfg, out, args.data)
    model = load_model(args.model or out / "source_model.json")
    target = data.splits["target"]
    truth = np.array([s.label for s in target], dtype=np.float64) if all(s.label is not None for s in target) else None
    batch = Batch.from_samples([s.unlabeled() for s in target])
    replay = Batch.from_samples(data.splits["source_train"])
    hook = label_noise_hook(cfg.label_noise, RngStream(cfg.seed).child("noise")) if cfg.label_noise > 0 else None

    pseudo_path = out / "pseudo_labels.jsonl"
    sink = None
    if args.dump_pseudo:
        pseudo_path.unlink(missing_ok=True)
        ids = [s.id for s in target]

        def sink(batch_index, idx, labels):
            dump_records(labels.records([ids[j] for j in idx]), pseudo_path, batch_index)

    model, trace = adapt_stream(model, batch, replay, cfg.adaptation(), RngStream(cfg.seed).child("adapt"),
                                truth=truth, label_hook=hook, pseudo_sink=sink)
    save_model(model, out / "adapted_model.json")
    trace.to_csv(out / "trace.csv")
    _save_config(cfg, out)
    msg = f"adapted over {len(trace)} batches"
    if truth is not None:
        msg += f", pseudo-label accuracy {trace.pseudo_accuracy:.4f}"
    print(msg)
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    out = _run_dir(cfg)
    data = _load_data(cfg, out, args.data)
    model_path = args.model or (out / "adapted_model.json" if (out / "adapted_model.json").exists()
                                else out / "source_model.json")
    model = load_model(model_path)
    report = evaluate_stage(cfg, model, data)
    target = data.splits["target"]
    scores = inference_scores(model, target, cfg.eval_k, cfg.dropout_rate,
                              RngStream(cfg.seed).child("eval").child("target"))
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "score"])
        for s, p in zip(target, scores):
            w.writerow([s.id, s.label, format(float(p), ".17g")])
    (out / "report.json").write_text(report.to_json())
    _save_config(cfg, out)
    print(f"model {model_path}")
    print(report.table(), end="")
    return EXIT_OK


def _fmt_pct(x):
    return "—" if x is None else f"{100 * x:.2f}"


def report_rows(run_dirs) -> list[tuple[str, float | None, float | None]]:
    rows = []
    for d in run_dirs:
        path = Path(d) / "report.json"
        try:
            rep = json.loads(path.read_text())
            rows.append((str(d), float(rep["hter"]), float(rep["auc"])))
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError):
            rows.append((str(d), None, None))
    done = [r for r in rows if r[1] is not None]
    avg = (mean(r[1] for r in done), mean(r[2] for r in done)) if done else (None, None)
    return rows + [("Average", *avg)]


def cmd_report(cfg: ExperimentConfig, args) -> int:
    out = _run_dir(cfg)
    rows = report_rows(args.runs)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "HTER (%)", "AUC (%)"])
        for name, h, a in rows:
            w.writerow([name, _fmt_pct(h), _fmt_pct(a)])
    lines = ["| run | HTER (%) | AUC (%) |", "|---|---:|---:|"]
    lines += [f"| {name} | {_fmt_pct(h)} | {_fmt_pct(a)} |" for name, h, a in rows]
    text = "\n".join(lines) + "\n"
    (out / "report.md").write_text(text)
    print(text, end="")
    return EXIT_OK


def sweep_k(cfg: ExperimentConfig, ks=DEFAULT_KS, seeds=range(5)) -> list[dict]:
    """Adapted target HTER/AUC for every (K, seed); K drives both pseudo-labeling and inference.

    Data and the source model are shared across K for a given seed.
    """
    from .experiments import run

    rows = []
    for seed in seeds:
        base = cfg.replace(seed=seed)
        data = generate_data(base)
        source, _ = train_source_stage(base, data)
        for k in ks:
            res = run(base.replace(k=k, eval_k=k), data, source)
            rows.append({"k": k, "seed": seed, "hter": res.adapted.hter, "auc": res.adapted.auc})
    return rows


def cmd_sweep_k(cfg: ExperimentConfig, args) -> int:
    out = _run_dir(cfg)
    ks = [int(x) for x in args.ks.split(",")]
    seeds = [int(x) for x in args.seeds.split(",")] if args.seeds else list(range(cfg.seed, cfg.seed + 5))
    if any(k < 1 for k in ks):
        raise ConfigError("k: sweep values must be >= 1")
    rows = sweep_k(cfg, ks, seeds)
    with open(out / "sweep_k.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "seed", "hter", "auc"])
        for r in rows:
            w.writerow([r["k"], r["seed"], format(r["hter"], ".17g"), format(r["auc"], ".17g")])
    summary = []
    for k in ks:
        sel = [r for r in rows if r["k"] == k]
        summary.append({"k": k, "hter": mean(r["hter"] for r in sel), "auc": mean(r["auc"] for r in sel)})
    dump_json({"seeds": seeds, "mean": summary}, out / "sweep_k.json")
    _save_config(cfg, out)
    print("| K | HTER (%) | AUC (%) |\n|---:|---:|---:|")
    for s in summary:
        print(f"| {s['k']} | {100 * s['hter']:.2f} | {100 * s['auc']:.2f} |")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "sweep-k": cmd_sweep_k,
}


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help=f"RNG seed (falls back to ${SEED_ENV})")
    common.add_argument("--missing", choices=[p.value for p in MissingPattern], help="target modalities to strip")
    common.add_argument("--pseudo", choices=["naive", "reliability"])
    common.add_argument("--strategy", choices=["plain", "alpha", "naive"], help="naive is an alias of plain")
    common.add_argument("--k", type=int, help="dropout passes for pseudo-labeling")
    common.add_argument("--threshold-mode", dest="threshold_mode", help="youden-source, fixed:X or oracle-target")
    common.add_argument("--out", help="run directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")

    parser = argparse.ArgumentParser(prog="mfasda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    for name, helptext in (("train-source", "train on the labeled source domains"),
                           ("adapt", "adapt on the unlabeled target"),
                           ("evaluate", "score the target split")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", help="dataset directory (default: <out>/data)")
        if name != "train-source":
            p.add_argument("--model", help="model file")
        if name == "adapt":
            p.add_argument("--dump-pseudo", action="store_true", help="write pseudo_labels.jsonl")
    p = sub.add_parser("report", parents=[common], help="tabulate report.json files of several runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p = sub.add_parser("sweep-k", parents=[common], help="adapted HTER/AUC across dropout pass counts")
    p.add_argument("--ks", default=",".join(map(str, DEFAULT_KS)))
    p.add_argument("--seeds", help="comma-separated seeds (default: five seeds from --seed)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UndefinedMetricError as exc:
        print(f"error: undefined metric: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except (DatasetLoadError, ModelLoadError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
