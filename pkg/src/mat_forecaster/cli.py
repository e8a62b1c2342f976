"""Operator surface. Subcommands: featurize, synth, train, eval, predict,
inspect-attn. Every command reads a sectioned key=value config file
(--config), honors --seed/--out overrides, writes a resolved config snapshot
next to its outputs, and exits 0 on success, 1 on usage/config errors, 2 on
data errors, 3 on numeric errors.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    ElasticNetForecaster,
    VanillaConfig,
    VanillaModel,
    load_elasticnet_checkpoint,
    load_vanilla_checkpoint,
    save_elasticnet_checkpoint,
    save_vanilla_checkpoint,
)
from .data import (
    Coupling,
    SyntheticSpec,
    align_and_window,
    apply_normalizer,
    downsample_monthly,
    featurize_text,
    fit_normalizer,
    generate_synthetic,
    load_timeseries_csv,
    month_index,
    month_start,
    read_corpus_jsonl,
    read_frame_csv,
    read_lexicon_json,
    split_dataset,
    write_frame_csv,
    write_timeseries_csv,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DimensionError,
    MaskingError,
    MatError,
    NumericError,
    TrainingError,
    UsageError,
)
from .model import MATConfig, MATModel, load_checkpoint, read_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate, per_step_metrics, train

_FMT = "{:.10g}"

_KNOWN_KEYS = {
    "run": {"model", "seed", "out"},
    "data": {"timeseries", "topics", "coverage", "corpus", "lexicon", "target",
             "lookback_ts", "lookback_txt", "horizon", "denormalize_metrics"},
    "model": {"d_model", "heads", "enc_layers", "dec_layers", "d_ff", "dropout",
              "head_dim"},
    "training": {"batch_size", "lr", "max_epochs", "patience", "teacher_forcing"},
    "synth": {"months", "ts_features", "topics", "ts_couplings", "topic_couplings",
              "noise"},
}


class RunConfig:
    """Validated view of the config file plus command-line overrides."""

    def __init__(self, parser: configparser.ConfigParser, base_dir: Path):
        self.base_dir = base_dir
        for section in parser.sections():
            if section not in _KNOWN_KEYS:
                raise ConfigError(f"unknown config section [{section}]")
            for key in parser[section]:
                if key not in _KNOWN_KEYS[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
        self._p = parser

    def get(self, section, key, default=None):
        if self._p.has_option(section, key):
            return self._p.get(section, key)
        return default

    def require(self, section, key):
        value = self.get(section, key)
        if value is None:
            raise ConfigError(f"config is missing [{section}] {key}")
        return value

    def get_int(self, section, key, default=None):
        raw = self.get(section, key)
        if raw is None:
            if default is None:
                raise ConfigError(f"config is missing [{section}] {key}")
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be an integer, got {raw!r}") from None

    def get_float(self, section, key, default=None):
        raw = self.get(section, key)
        if raw is None:
            if default is None:
                raise ConfigError(f"config is missing [{section}] {key}")
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be a number, got {raw!r}") from None

    def get_bool(self, section, key, default):
        raw = self.get(section, key)
        if raw is None:
            return default
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key} must be a boolean, got {raw!r}")

    def path(self, section, key, required=True):
        raw = self.require(section, key) if required else self.get(section, key)
        if raw is None:
            return None
        p = Path(raw)
        if not p.is_absolute():
            p = self.base_dir / p
        return p

    def snapshot(self, extra: dict):
        """Resolved config (file content + overrides), stable key order."""
        out = configparser.ConfigParser()
        for section in sorted(self._p.sections()):
            out[section] = dict(sorted(self._p[section].items()))
        for (section, key), value in extra.items():
            if not out.has_section(section):
                out[section] = {}
            out[section][key] = str(value)
        return out


def load_run_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    parser = configparser.ConfigParser()
    try:
        parser.read(p, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{p}: cannot parse config ({e})") from e
    return RunConfig(parser, p.parent.resolve())


def _resolve_seed(cfg: RunConfig, args):
    if args.seed is not None:
        return args.seed
    return cfg.get_int("run", "seed", 0)


def _resolve_out(cfg: RunConfig, args):
    raw = args.out or cfg.get("run", "out")
    if raw is None:
        raise ConfigError("no output directory: set [run] out or pass --out")
    out = Path(raw)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_snapshot(cfg: RunConfig, out_dir: Path, seed, command):
    snap = cfg.snapshot({("run", "seed"): seed, ("run", "out"): str(out_dir),
                         ("run", "command"): command})
    # 'command' is informational; keep it under [run] without widening the schema
    with open(out_dir / "config_resolved.ini", "w", encoding="utf-8") as f:
        snap.write(f)


def _monthly_table(cfg: RunConfig):
    table = load_timeseries_csv(cfg.path("data", "timeseries"))
    if table.frequency != "monthly":
        table = downsample_monthly(table)
    return table


def _text_frame(cfg: RunConfig, table):
    topics_path = cfg.path("data", "topics", required=False)
    if topics_path is not None:
        return read_frame_csv(topics_path, cfg.path("data", "coverage", required=False))
    corpus_path = cfg.path("data", "corpus", required=False)
    lexicon_path = cfg.path("data", "lexicon", required=False)
    if corpus_path is None or lexicon_path is None:
        raise ConfigError("[data] needs either topics= or corpus= plus lexicon=")
    corpus = read_corpus_jsonl(corpus_path)
    lexicon = read_lexicon_json(lexicon_path)
    calendar = list(table.timestamps)
    return featurize_text(corpus, lexicon, calendar)


def prepare_dataset(cfg: RunConfig):
    """The shared train/eval path: table -> frame -> windows -> split -> normalize."""
    table = _monthly_table(cfg)
    frame = _text_frame(cfg, table)
    target = cfg.require("data", "target")
    lookback_ts = cfg.get_int("data", "lookback_ts", 9)
    lookback_txt = cfg.get_int("data", "lookback_txt", 9)
    horizon = cfg.get_int("data", "horizon", 1)
    samples = align_and_window(table, frame, target, lookback_ts, lookback_txt, horizon)
    if len(samples) < 3:
        raise DataError(f"only {len(samples)} samples; need at least 3 to split")
    train_s, val_s, test_s = split_dataset(samples)
    norm = fit_normalizer(train_s)
    return {
        "train": apply_normalizer(train_s, norm),
        "val": apply_normalizer(val_s, norm),
        "test": apply_normalizer(test_s, norm),
        "raw_test": test_s,
        "norm": norm,
        "d_txt": samples[0].x_txt.values.shape[1],
        "d_ts": samples[0].x_ts.values.shape[1],
        "lookback_txt": lookback_txt,
        "lookback_ts": lookback_ts,
        "horizon": horizon,
    }


def _model_config(cfg: RunConfig, data, cls):
    return cls(
        d_txt=data["d_txt"],
        d_ts=data["d_ts"],
        d_model=cfg.get_int("model", "d_model", 32),
        heads=cfg.get_int("model", "heads", 4),
        n_enc_layers=cfg.get_int("model", "enc_layers", 2),
        n_dec_layers=cfg.get_int("model", "dec_layers", 1),
        d_ff=cfg.get_int("model", "d_ff", 64),
        lookback_txt=data["lookback_txt"],
        lookback_ts=data["lookback_ts"],
        horizon=data["horizon"],
        dropout=cfg.get_float("model", "dropout", 0.1),
        head_dim=(cfg.get_int("model", "head_dim")
                  if cfg.get("model", "head_dim") is not None else None),
    ).validate()


def _train_config(cfg: RunConfig, seed):
    return TrainConfig(
        batch_size=cfg.get_int("training", "batch_size", 16),
        lr=cfg.get_float("training", "lr", 1e-4),
        max_epochs=cfg.get_int("training", "max_epochs", 10),
        patience=cfg.get_int("training", "patience", 3),
        seed=seed,
        teacher_forcing=cfg.get_bool("training", "teacher_forcing", True),
    ).validate()


def write_metrics_csv(path, rows):
    """rows: (model, horizon-label, mse, mae)"""
    with open(path, "w", encoding="utf-8") as f:
        f.write("model,horizon,mse,mae\n")
        for model, horizon, mse, mae in rows:
            f.write(f"{model},{horizon},{_FMT.format(mse)},{_FMT.format(mae)}\n")


def _metric_rows(kind, model, test_samples, norm, denorm):
    rows = []
    for step, m in per_step_metrics(model, test_samples, norm, denorm):
        rows.append((kind, str(step), m.mse, m.mae))
    agg = evaluate(model, test_samples, norm, denorm)
    rows.append((kind, "all", agg.mse, agg.mae))
    return rows, agg


def cmd_featurize(args):
    cfg = load_run_config(args.config)
    seed = _resolve_seed(cfg, args)
    out_dir = _resolve_out(cfg, args)
    corpus_path = Path(args.corpus) if args.corpus else cfg.path("data", "corpus")
    lexicon_path = Path(args.lexicon) if args.lexicon else cfg.path("data", "lexicon")
    corpus = read_corpus_jsonl(corpus_path)
    lexicon = read_lexicon_json(lexicon_path)
    if not corpus.documents:
        raise DataError("empty corpus")
    months = sorted({month_index(d.date) for d in corpus.documents})
    calendar = [month_start(m) for m in range(months[0], months[-1] + 1)]
    frame = featurize_text(corpus, lexicon, calendar)
    write_frame_csv(frame, out_dir / "topics.csv", out_dir / "coverage.csv")
    _write_snapshot(cfg, out_dir, seed, "featurize")
    for name in frame.topic_names:
        print(f"{name}: {frame.sentence_counts.get(name, 0)} sentences")
    print(f"wrote {out_dir / 'topics.csv'} ({len(calendar)} months x {len(frame.topic_names)} topics)")
    return 0


def _parse_couplings(raw, what):
    couplings = []
    if not raw or not raw.strip():
        return couplings
    for part in raw.split(","):
        fields = part.strip().split(":")
        if len(fields) != 3:
            raise ConfigError(f"bad {what} coupling {part!r}; want channel:coeff:lag")
        try:
            couplings.append(Coupling(channel=int(fields[0]), coeff=float(fields[1]),
                                      lag=int(fields[2])))
        except ValueError:
            raise ConfigError(f"bad {what} coupling {part!r}") from None
    return couplings


def cmd_synth(args):
    cfg = load_run_config(args.config)
    seed = _resolve_seed(cfg, args)
    out_dir = _resolve_out(cfg, args)
    spec = SyntheticSpec(
        months=cfg.get_int("synth", "months", 120),
        n_ts_features=cfg.get_int("synth", "ts_features", 4),
        n_topics=cfg.get_int("synth", "topics", 3),
        ts_couplings=_parse_couplings(cfg.get("synth", "ts_couplings", ""), "series"),
        topic_couplings=_parse_couplings(cfg.get("synth", "topic_couplings", ""), "topic"),
        noise=cfg.get_float("synth", "noise", 0.1),
    )
    table, frame, truth = generate_synthetic(spec, seed)
    write_timeseries_csv(table, out_dir / "timeseries.csv")
    write_frame_csv(frame, out_dir / "topics.csv", out_dir / "coverage.csv")
    with open(out_dir / "truth.json", "w", encoding="utf-8") as f:
        json.dump({
            "seed": seed,
            "months": spec.months,
            "noise": spec.noise,
            "informative_ts": truth.informative_ts,
            "informative_topics": truth.informative_topics,
            "ts_couplings": [asdict(c) for c in spec.ts_couplings],
            "topic_couplings": [asdict(c) for c in spec.topic_couplings],
        }, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_snapshot(cfg, out_dir, seed, "synth")
    print(f"wrote synthetic dataset to {out_dir} ({spec.months} months)")
    return 0


def _build_and_train(cfg: RunConfig, data, kind, seed):
    tc = _train_config(cfg, seed)
    if kind == "elasticnet":
        model = ElasticNetForecaster(horizon=data["horizon"]).fit(data["train"], data["val"])
        return model, None
    if kind == "mat":
        model = MATModel(_model_config(cfg, data, MATConfig), seed=seed)
    elif kind == "vanilla":
        model = VanillaModel(_model_config(cfg, data, VanillaConfig), seed=seed)
    else:
        raise ConfigError(f"unknown model kind {kind!r} (want mat, vanilla, or elasticnet)")
    _, history = train(model, data["train"], data["val"], tc, data["norm"],
                       denormalize_val=cfg.get_bool("data", "denormalize_metrics", True))
    return model, history


def cmd_train(args):
    cfg = load_run_config(args.config)
    seed = _resolve_seed(cfg, args)
    out_dir = _resolve_out(cfg, args)
    kind = (args.model or cfg.get("run", "model", "mat")).lower()
    data = prepare_dataset(cfg)
    denorm = cfg.get_bool("data", "denormalize_metrics", True)
    model, history = _build_and_train(cfg, data, kind, seed)

    ckpt = out_dir / "checkpoint.bin"
    if kind == "mat":
        save_checkpoint(ckpt, model.config, model.params)
    elif kind == "vanilla":
        save_vanilla_checkpoint(ckpt, model.config, model.params)
    else:
        save_elasticnet_checkpoint(ckpt, model, feature_width=len(
            np.concatenate([data["train"][0].x_txt.values.reshape(-1),
                            data["train"][0].x_ts.values.reshape(-1)])))

    history_path = out_dir / "history.csv"
    if history is not None:
        history.write_csv(history_path)
    else:
        with open(history_path, "w", encoding="utf-8") as f:
            f.write("epoch,train_loss,val_mse,seconds\n")

    rows, agg = _metric_rows(kind, model, data["test"], data["norm"], denorm)
    write_metrics_csv(out_dir / "metrics.csv", rows)
    _write_snapshot(cfg, out_dir, seed, "train")
    print(f"{kind}: test mse {_FMT.format(agg.mse)}, mae {_FMT.format(agg.mae)} "
          f"({agg.n} timepoints); artifacts in {out_dir}")
    return 0


def _load_any_checkpoint(path):
    header, _ = read_checkpoint(path)
    kind = header.get("model_kind")
    if kind == "mat":
        params, config = load_checkpoint(path)
        return MATModel(config, params=params), kind
    if kind == "vanilla":
        params, config = load_vanilla_checkpoint(path)
        return VanillaModel(config, params=params), kind
    if kind == "elasticnet":
        fc, _ = load_elasticnet_checkpoint(path)
        return fc, kind
    raise CheckpointError(f"{path}: unknown model kind {kind!r}")


def cmd_eval(args):
    cfg = load_run_config(args.config)
    seed = _resolve_seed(cfg, args)
    out_dir = _resolve_out(cfg, args)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    model, kind = _load_any_checkpoint(ckpt)
    data = prepare_dataset(cfg)
    denorm = cfg.get_bool("data", "denormalize_metrics", True)
    rows, agg = _metric_rows(kind, model, data["test"], data["norm"], denorm)
    write_metrics_csv(out_dir / "metrics.csv", rows)
    _write_snapshot(cfg, out_dir, seed, "eval")
    print("model,horizon,mse,mae")
    for model_name, horizon, mse, mae in rows:
        print(f"{model_name},{horizon},{_FMT.format(mse)},{_FMT.format(mae)}")
    return 0


def cmd_predict(args):
    cfg = load_run_config(args.config)
    seed = _resolve_seed(cfg, args)
    out_dir = _resolve_out(cfg, args)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    model, kind = _load_any_checkpoint(ckpt)
    data = prepare_dataset(cfg)
    denorm = cfg.get_bool("data", "denormalize_metrics", True)
    preds = model.predict_batch(data["test"])
    actual = np.stack([s.y_future for s in data["test"]])
    if denorm:
        preds = data["norm"].denormalize_target(preds)
        actual = data["norm"].denormalize_target(actual)
    path = out_dir / "predictions.csv"
    with open(path, "w", encoding="utf-8") as f:
        f.write("sample,anchor,step,prediction,actual\n")
        for i, s in enumerate(data["test"]):
            for k in range(preds.shape[1]):
                f.write(f"{i},{s.anchor.isoformat()},{k + 1},"
                        f"{_FMT.format(preds[i, k])},{_FMT.format(actual[i, k])}\n")
    _write_snapshot(cfg, out_dir, seed, "predict")
    print(f"wrote {path} ({preds.shape[0]} samples x {preds.shape[1]} steps, {kind})")
    return 0


def cmd_inspect_attn(args):
    cfg = load_run_config(args.config)
    seed = _resolve_seed(cfg, args)
    out_dir = _resolve_out(cfg, args)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    model, kind = _load_any_checkpoint(ckpt)
    if kind != "mat":
        raise UsageError(f"inspect-attn needs a 'mat' checkpoint, got {kind!r}")
    data = prepare_dataset(cfg)
    test = data["test"]
    if not (0 <= args.sample < len(test)):
        raise UsageError(f"sample index {args.sample} out of range (test split has {len(test)})")
    sample = test[args.sample]
    record = model.export_attention(sample)
    attn_dir = out_dir / "attention"
    attn_dir.mkdir(parents=True, exist_ok=True)

    def write_matrix(path, mat):
        with open(path, "w", encoding="utf-8") as f:
            for row in np.atleast_2d(mat):
                f.write(",".join(_FMT.format(v) for v in row) + "\n")

    def write_feature_weights(path, weights, names, timestamps):
        with open(path, "w", encoding="utf-8") as f:
            f.write("timestep," + ",".join(names) + "\n")
            for ts, row in zip(timestamps, weights):
                f.write(ts.isoformat() + "," + ",".join(_FMT.format(v) for v in row) + "\n")

    write_feature_weights(attn_dir / "feature_weights_txt.csv", record.feature_weights_txt,
                          sample.x_txt.feature_names, sample.x_txt.timestamps)
    write_feature_weights(attn_dir / "feature_weights_ts.csv", record.feature_weights_ts,
                          sample.x_ts.feature_names, sample.x_ts.timestamps)
    count = 2
    for (layer, block_kind, stream), mats in sorted(record.temporal.items()):
        for head in range(mats.shape[0]):
            name = f"attn_layer{layer}_{block_kind}_{stream}_h{head}.csv"
            write_matrix(attn_dir / name, mats[head])
            count += 1
    _write_snapshot(cfg, out_dir, seed, "inspect-attn")
    print(f"wrote {count} attention files to {attn_dir}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="matfc", description=__doc__)
    parser.add_argument("--version", action="version", version=f"matfc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="sectioned key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", default=None, help="override [run] out directory")

    p = sub.add_parser("featurize", help="corpus + lexicon -> monthly topic scores")
    common(p)
    p.add_argument("--corpus", default=None, help="override [data] corpus")
    p.add_argument("--lexicon", default=None, help="override [data] lexicon")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("synth", help="generate a synthetic dataset with known couplings")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="split, normalize, train, evaluate, checkpoint")
    common(p)
    p.add_argument("--model", default=None, choices=["mat", "vanilla", "elasticnet"],
                   help="override [run] model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write test-split predictions")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect-attn", help="export attention heatmap data for one sample")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", type=int, default=0, help="test-split sample index")
    p.set_defaults(func=cmd_inspect_attn)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args) or 0
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (NumericError, TrainingError, DimensionError, MaskingError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3
    except MatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
