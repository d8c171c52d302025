"""Operator surface: ``trep train | encode | eval`` wired through a JSON
config file with flag overrides (flags win).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. ``TREP_SEED`` is consulted when neither the config nor a flag
provides a seed.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import downstream as ds_mod
from .encoder import EncoderConfig
from .errors import ConfigError, DataError, NumericError, TrepError
from .losses import TaskConfig
from .trainer import (Model, TrainConfig, encode_dataset, load_checkpoint,
                      save_checkpoint, save_history, train)

EVAL_PROTOCOLS = ("forecast", "classify", "anomaly", "windowed-anomaly")

EVAL_DEFAULTS = {
    "horizons": [1, 5],
    "lookback": 16,
    "w": 10,
    "window": 6,
    "test_fraction": 0.33,
    "c_grid": list(ds_mod.SVM_C_GRID),
    "alpha_grid": list(ds_mod.RIDGE_ALPHA_GRID),
    "anomaly": {
        "trailing_window": 21,
        "beta": 4.0,
        "delay": ds_mod.ANOMALY_DELAY,
        "diff_order": 0,
        "encode_window": 64,
        "normalize": True,
    },
}


def _dataclass_section(cls, overrides: dict, name: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - fields
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r} section: {sorted(unknown)}")
    return overrides


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config root must be a JSON object")
    known = {"seed", "out_dir", "data", "train", "encoder", "tasks", "eval"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"{path}: unknown top-level key(s): {sorted(unknown)}")
    return cfg


def resolve_config(cfg: dict, args) -> dict:
    """Materialize every default into one echoable dict; flags override."""
    seed = cfg.get("seed")
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    if seed is None:
        seed = int(os.environ.get("TREP_SEED", "0"))

    train_sec = dict(cfg.get("train", {}))
    _dataclass_section(TrainConfig, {k: v for k, v in train_sec.items()
                                     if k not in ("encoder", "tasks", "seed")} | {}, "train")
    enc_sec = _dataclass_section(EncoderConfig, dict(cfg.get("encoder", {})), "encoder")
    task_sec = _dataclass_section(TaskConfig, dict(cfg.get("tasks", {})), "tasks")

    for flag, key in (("epochs", "max_epochs"), ("batch_size", "batch_size"), ("lr", "lr")):
        v = getattr(args, flag, None)
        if v is not None:
            train_sec[key] = v

    eval_sec = dict(cfg.get("eval", {}))
    unknown = set(eval_sec) - set(EVAL_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown key(s) in 'eval' section: {sorted(unknown)}")
    resolved_eval = json.loads(json.dumps(EVAL_DEFAULTS))
    anomaly_over = eval_sec.pop("anomaly", {})
    _dataclass_section(ds_mod.AnomalyConfig, dict(anomaly_over), "eval.anomaly")
    resolved_eval.update(eval_sec)
    resolved_eval["anomaly"].update(anomaly_over)

    enc_cfg = EncoderConfig(**enc_sec)
    task_cfg = TaskConfig(**{k: tuple(v) if k == "weights" else v for k, v in task_sec.items()})
    tc_kwargs = {k: v for k, v in train_sec.items() if k not in ("encoder", "tasks", "seed")}
    train_cfg = TrainConfig(seed=seed, encoder=enc_cfg, tasks=task_cfg, **tc_kwargs)
    train_cfg.validate()

    resolved = {
        "seed": seed,
        "out_dir": cfg.get("out_dir", "."),
        "data": cfg.get("data", {}),
        "train": {k: v for k, v in dataclasses.asdict(train_cfg).items()
                  if k not in ("encoder", "tasks", "seed")},
        "encoder": dataclasses.asdict(enc_cfg) | {"width": enc_cfg.hidden_width},
        "tasks": dataclasses.asdict(task_cfg) | {
            "weights": list(task_cfg.weights),
            "head_hidden": task_cfg.head_hidden or enc_cfg.repr_dim,
        },
        "eval": resolved_eval,
    }
    resolved["_train_cfg"] = train_cfg
    return resolved


def _load_dataset(data_sec: dict) -> data_mod.TimeSeriesDataset:
    if not data_sec:
        raise ConfigError("config needs a 'data' section with 'path' or 'synth'")
    if "path" in data_sec:
        extra = set(data_sec) - {"path", "label_kind", "zscore"}
        if extra:
            raise ConfigError(f"unknown key(s) in 'data' section: {sorted(extra)}")
        ds = data_mod.load_csv(data_sec["path"], label_kind=data_sec.get("label_kind", "auto"))
    elif "synth" in data_sec:
        extra = set(data_sec) - {"synth", "zscore"}
        if extra:
            raise ConfigError(f"unknown key(s) in 'data' section: {sorted(extra)}")
        spec = dict(data_sec["synth"])
        kind = spec.pop("kind", None)
        seed = spec.pop("seed", 0)
        if kind is None:
            raise ConfigError("'data.synth' needs a 'kind'")
        ds = data_mod.synth(kind, spec, seed=seed)
    else:
        raise ConfigError("'data' section needs either 'path' or 'synth'")
    if data_sec.get("zscore", True):
        ds = data_mod.zscore(ds)
    return ds


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    resolved = resolve_config(load_config(args.config), args)
    train_cfg: TrainConfig = resolved.pop("_train_cfg")
    out_dir = Path(args.out or resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    ds = _load_dataset(resolved["data"])
    if resolved["encoder"]["in_channels"] != ds.n_channels:
        train_cfg.encoder.in_channels = ds.n_channels
        resolved["encoder"]["in_channels"] = ds.n_channels

    model, history = train(ds, train_cfg)
    _write_json(resolved, out_dir / "resolved_config.json")
    save_history(history, out_dir / "history.csv")
    save_checkpoint(model, out_dir / "checkpoint_final.bin", config_echo=resolved)
    save_checkpoint(model.best, out_dir / "checkpoint_best.bin", config_echo=resolved)
    print(f"trained {len(history)} steps; artifacts in {out_dir}")
    return 0


def cmd_encode(args) -> int:
    model = load_checkpoint(args.ckpt)
    ds = _load_dataset({"path": args.data} if args.data.endswith(".csv")
                       else {"synth": json.loads(args.data)})
    rep = encode_dataset(model, ds, granularity=args.granularity, w=args.w)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n, t_len, f_dim = rep.values.shape
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("instance_id,t," + ",".join(f"f{i}" for i in range(f_dim)) + "\n")
        for i in range(n):
            for t in range(t_len):
                cells = ",".join(repr(float(v)) for v in rep.values[i, t])
                fh.write(f"{i},{t},{cells}\n")
    print(f"wrote {n * t_len} representation rows to {out}")
    return 0


def _eval_forecast(model, ds, ev, out_dir):
    report = ds_mod.forecast_eval(model, ds, ev["horizons"], lookback=ev["lookback"],
                                  alpha_grid=ev["alpha_grid"])
    rows = []
    for h, m in sorted(report.horizons.items()):
        rows.append(("mse", h, m["mse"]))
        rows.append(("mae", h, m["mae"]))
    _write_metric_csv(out_dir / "forecast_metrics.csv", rows)
    summary = {"protocol": "forecast", "horizons": report.horizons,
               "lookback": report.lookback}
    _write_json(summary, out_dir / "forecast_summary.json")
    return summary


def _eval_classify(model, ds, ev, out_dir, seed):
    if ds.instance_labels is None:
        raise DataError("classification needs per-instance labels")
    from .experiments import stratified_split
    train_idx, test_idx = stratified_split(ds.instance_labels, ev["test_fraction"], seed)
    rep_tr = encode_dataset(model, ds.subset(train_idx), granularity="pooled", w=ev["w"])
    rep_te = encode_dataset(model, ds.subset(test_idx), granularity="pooled", w=ev["w"])
    acc, _ = ds_mod.timedim_classify(rep_tr, ds.instance_labels[train_idx],
                                     rep_te, ds.instance_labels[test_idx],
                                     c_grid=ev["c_grid"], seed=seed)
    _write_metric_csv(out_dir / "classify_metrics.csv", [("accuracy", ev["w"], acc)])
    summary = {"protocol": "classify", "accuracy": acc, "w": ev["w"],
               "n_train": len(train_idx), "n_test": len(test_idx)}
    _write_json(summary, out_dir / "classify_summary.json")
    return summary


def _eval_anomaly(model, ds, ev, out_dir):
    acfg = ds_mod.AnomalyConfig(**ev["anomaly"])
    rows = []
    per_t_path = out_dir / "anomaly_scores.csv"
    summaries = []
    with open(per_t_path, "w", encoding="utf-8") as fh:
        fh.write("instance_id,t,score,adjusted,flag\n")
        for i in range(ds.n_instances):
            res = ds_mod.anomaly_score_stream(model, ds.values[i], acfg)
            for t in range(len(res.scores)):
                fh.write(f"{i},{t},{res.scores[t]!r},{res.adjusted[t]!r},{int(res.flags[t])}\n")
            if ds.timestep_labels is not None:
                score = ds_mod.f1_with_delay(res.flags, ds.timestep_labels[i], acfg.delay)
                rows.append((f"f1_delay{acfg.delay}", acfg.beta, score.f1))
                summaries.append({"instance": i, "f1": score.f1,
                                  "precision": score.precision, "recall": score.recall})
    if rows:
        _write_metric_csv(out_dir / "anomaly_metrics.csv", rows)
    summary = {"protocol": "anomaly", "beta": acfg.beta, "delay": acfg.delay,
               "instances": summaries, "scores_csv": per_t_path.name}
    _write_json(summary, out_dir / "anomaly_summary.json")
    return summary


def _eval_windowed(model, ds, ev, out_dir, seed):
    if ds.timestep_labels is None:
        raise DataError("windowed anomaly classification needs per-timestep labels")
    rng = np.random.default_rng(seed)
    order = rng.permutation(ds.n_instances)
    n_test = max(1, int(round(ds.n_instances * ev["test_fraction"])))
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    report = ds_mod.windowed_anomaly_classify(model, ds.subset(train_idx), ds.subset(test_idx),
                                              window=ev["window"], c_grid=ev["c_grid"], seed=seed)
    _write_metric_csv(out_dir / "windowed_anomaly_metrics.csv",
                      [("f1", ev["window"], report.f1),
                       ("accuracy", ev["window"], report.accuracy)])
    summary = {"protocol": "windowed-anomaly", "f1": report.f1,
               "accuracy": report.accuracy, "precision": report.precision,
               "recall": report.recall, "window": ev["window"]}
    _write_json(summary, out_dir / "windowed_anomaly_summary.json")
    return summary


def _write_metric_csv(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric,dataset,param,value\n")
        for metric, param, value in rows:
            fh.write(f"{metric},{path.stem},{param},{value!r}\n")


def cmd_eval(args) -> int:
    resolved = resolve_config(load_config(args.config), args)
    resolved.pop("_train_cfg")
    ev = resolved["eval"]
    model = load_checkpoint(args.ckpt)
    data_sec = {"path": args.data} if args.data else resolved["data"]
    ds = _load_dataset(data_sec)
    out_dir = Path(args.out or resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = resolved["seed"]
    if args.protocol == "forecast":
        summary = _eval_forecast(model, ds, ev, out_dir)
    elif args.protocol == "classify":
        summary = _eval_classify(model, ds, ev, out_dir, seed)
    elif args.protocol == "anomaly":
        summary = _eval_anomaly(model, ds, ev, out_dir)
    else:
        summary = _eval_windowed(model, ds, ev, out_dir, seed)
    print(json.dumps({k: v for k, v in summary.items() if k != "instances"}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trep",
                                     description="Self-supervised time-series representations")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train an encoder from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", help="output directory (default: config out_dir)")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.set_defaults(fn=cmd_train)

    p_enc = sub.add_parser("encode", help="encode a dataset with a checkpoint")
    p_enc.add_argument("--ckpt", required=True)
    p_enc.add_argument("--data", required=True, help="dataset CSV path")
    p_enc.add_argument("--granularity", choices=("timestep", "pooled", "instance"),
                       default="timestep")
    p_enc.add_argument("--w", type=int, default=10)
    p_enc.add_argument("--out", required=True)
    p_enc.set_defaults(fn=cmd_encode)

    p_eval = sub.add_parser("eval", help="run an evaluation protocol")
    p_eval.add_argument("--protocol", choices=EVAL_PROTOCOLS, required=True)
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", help="dataset CSV (overrides config data section)")
    p_eval.add_argument("--config")
    p_eval.add_argument("--out")
    p_eval.add_argument("--seed", type=int)
    p_eval.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except TrepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
