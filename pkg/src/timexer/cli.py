"""Command-line entry point: ``timexer <subcommand> [flags]``.

Model flags mirror the :class:`TimeXerConfig` field names (``--model-dim``
sets ``model_dim``). Values are resolved in increasing precedence: built-in
defaults, lengths from the data manifest, ``--config FILE``, ``TXER_<FIELD>``
environment variables (e.g. ``TXER_SEED=3``), then the command line.

Exit codes: 0 on success, 1 on data/config/runtime errors (one line
``error: <ClassName>: <message>`` on stderr), 2 on usage errors.
"""

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .analysis import (
    DEFAULT_EXO_LOOKBACKS,
    DEFAULT_MASK_RATIOS,
    DEFAULT_PATCH_LENGTHS,
    attention_for_sample,
    cka_matrix,
    collect_representations,
    first_last_similarity,
    lookback_sweep,
    mask_sweep,
    patch_length_sweep,
    run_ablation,
)
from .checkpoint import load_checkpoint, save_checkpoint, write_arrays
from .data import DataManifest, PreparedData, SplitSpec, multivariate_windows, synth_causal_dataset
from .errors import ConfigError, ContractError, DataError, ShapeError, TrainingError
from .model import VARIANTS, TimeXerConfig, forward, init_params, parse_key_values
from .records import format_table, write_records
from .training import evaluate, predict, metrics, train

ENV_PREFIX = "TXER_"
RUN_KEYS = ("command", "data", "build", "out")
HANDLED = (ConfigError, DataError, ShapeError, ContractError, TrainingError, OSError, KeyError)
FIELDS = {f.name: type(f.default) for f in dataclasses.fields(TimeXerConfig)}


# --------------------------------------------------------------------------
# argument parsing


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list of {kind.__name__}") from None

    return parse


def _add_config_flags(p):
    group = p.add_argument_group("model and training")
    for name, kind in FIELDS.items():
        flag = "--" + name.replace("_", "-")
        choices = {"variant": VARIANTS, "head_mode": ("flatten_all", "variate_only")}.get(name)
        group.add_argument(flag, dest=name, default=None, choices=choices,
                           metavar=None if choices else kind.__name__.upper())
    p.add_argument("--config", help="key=value file supplying any model flag")


def _add_common(p, data=True, checkpoint=False):
    if data:
        p.add_argument("--data", required=True, help="dataset manifest (key=value file)")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="timexer", description="Forecasting with exogenous variables.")
    parser.add_argument("--version", action="version", version=f"timexer {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    _add_common(p)
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    _add_common(p, checkpoint=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--denormalize", action="store_true", help="report metrics in original units")

    p = sub.add_parser("forecast", help="forecast from the last available window")
    _add_common(p, checkpoint=True)

    p = sub.add_parser("ablate", help="train every embedding variant")
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--variants", type=_csv_list(str), default=list(VARIANTS))
    p.add_argument("--horizons", type=_csv_list(int), default=None)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("mask-sweep", help="evaluate one model under exogenous masking")
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--ratios", type=_csv_list(float), default=list(DEFAULT_MASK_RATIOS))

    p = sub.add_parser("lookback-sweep", help="vary the exogenous lookback")
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--exo-lengths", type=_csv_list(int), default=list(DEFAULT_EXO_LOOKBACKS))
    p.add_argument("--horizons", type=_csv_list(int), default=None)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("patch-sweep", help="vary the patch length")
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--patch-lengths", type=_csv_list(int), default=list(DEFAULT_PATCH_LENGTHS))
    p.add_argument("--horizons", type=_csv_list(int), default=None)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("cka", help="layer-wise CKA similarity of a checkpoint")
    _add_common(p, checkpoint=True)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--tokens", default="all", choices=("all", "variate"))

    p = sub.add_parser("attn-map", help="export attention weights for one test window")
    _add_common(p, checkpoint=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--index", type=int, default=0)

    p = sub.add_parser("synth-data", help="write a synthetic dataset and its manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--T", type=int, default=4000)
    p.add_argument("--C", type=int, default=3)
    p.add_argument("--lag", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seasonal", type=float, default=0.5)
    p.add_argument("--harmonics", type=int, default=1)
    p.add_argument("--split", default="0.7,0.1,0.2")

    p = sub.add_parser("multivariate", help="channel-shared model forecasting every column")
    _add_common(p)
    _add_config_flags(p)
    return parser


# --------------------------------------------------------------------------
# configuration


def read_config_file(path):
    values = parse_key_values(Path(path).read_text(encoding="utf-8"))
    return {k: v for k, v in values.items() if k not in RUN_KEYS}


def resolve_config(args, manifest=None, environ=None):
    """Merge defaults, manifest lengths, config file, environment and flags."""
    environ = os.environ if environ is None else environ
    values = {}
    if manifest is not None:
        values.update({k: getattr(manifest, k) for k in ("lookback", "exo_lookback", "horizon") if getattr(manifest, k)})
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for name in FIELDS:
        env = environ.get(ENV_PREFIX + name.upper())
        if env is not None:
            values[name] = env
    for name in FIELDS:
        cli = getattr(args, name, None)
        if cli is not None:
            values[name] = cli
    return TimeXerConfig.from_dict(values)


def _finalize(config, data):
    if config.per_series_exo and config.n_exo != data.n_exo:
        config = config.replace(n_exo=data.n_exo)
    return config


def write_run_manifest(out, command, data_path, config):
    lines = [
        f"command={command}",
        f"data={Path(data_path).resolve() if data_path else ''}",
        f"build=timexer-{__version__}+{kernels.BACKEND_NAME}",
        f"out={Path(out).resolve()}",
    ]
    text = "\n".join(lines) + "\n" + config.resolved().to_text()
    (Path(out) / "run_manifest.txt").write_text(text, encoding="utf-8")


def _prepare(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DataManifest.read(args.data)
    return out, manifest


def _say(text):
    print(text, flush=True)


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    out, manifest = _prepare(args)
    config = resolve_config(args, manifest)
    write_run_manifest(out, "train", args.data, config)
    data = PreparedData.from_manifest(manifest)
    config = _finalize(config, data)
    windows = data.windows_for(config)
    log, timing = out / "train_log.jsonl", out / "timing.jsonl"
    log.write_text("")
    timing.write_text("")

    def on_epoch(rec):
        write_records(log, [{"epoch": rec.epoch, "train_mse": rec.train_mse, "val_mse": rec.val_mse}], append=True)
        write_records(timing, [{"epoch": rec.epoch, "seconds": rec.seconds}], append=True)
        _say(f"epoch {rec.epoch:3d}  train_mse {rec.train_mse:.5f}  val_mse {rec.val_mse:.5f}  ({rec.seconds:.1f}s)")

    params, report = train(init_params(config), config, windows["train"], windows["val"], on_epoch=on_epoch)
    write_records(log, [report.summary()], append=True)
    save_checkpoint(out / "checkpoint.txer", params, config.resolved())

    rows = []
    for split in ("val", "test"):
        if split not in windows:
            continue
        for denorm in (False, True):
            scores = evaluate(params, config, windows[split], data.endo_stats, denormalize=denorm)
            rows.append({"split": split, "scale": "original" if denorm else "normalized", **scores})
    write_records(out / "metrics.jsonl", rows)
    _say(format_table(rows, ["split", "scale", "mse", "mae"]))
    return 0


def _load_for_checkpoint(args):
    out, manifest = _prepare(args)
    params, config = load_checkpoint(args.checkpoint)
    write_run_manifest(out, args.command, args.data, config)
    return out, PreparedData.from_manifest(manifest), params, config


def cmd_evaluate(args):
    out, data, params, config = _load_for_checkpoint(args)
    windows = data.windows_for(config, splits=(args.split,))
    if args.split not in windows:
        raise DataError(f"split {args.split!r} has no windows")
    scores = evaluate(params, config, windows[args.split], data.endo_stats, denormalize=args.denormalize)
    row = {"split": args.split, "scale": "original" if args.denormalize else "normalized", **scores}
    write_records(out / "metrics.jsonl", [row])
    _say(format_table([row], ["split", "scale", "mse", "mae"]))
    return 0


def last_window_forecast(data, params, config):
    """Forecast the ``horizon`` steps after the end of the table, in original units."""
    table = data.table
    endo = table.column(data.roles.endo)
    exo = np.stack([table.column(c) for c in data.roles.exo])
    if len(endo) < max(config.lookback, config.exo_len):
        raise DataError(f"need at least {max(config.lookback, config.exo_len)} rows to forecast")
    pred = forward(endo[-config.lookback:], exo[:, -config.exo_len:], params, config).prediction.data
    mean, std = data.endo_stats
    return pred * std + mean


def cmd_forecast(args):
    out, data, params, config = _load_for_checkpoint(args)
    values = last_window_forecast(data, params, config)
    lines = ["step,value"] + [f"{i + 1},{float(v)!r}" for i, v in enumerate(values)]
    (out / "forecast.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _say("\n".join(lines))
    return 0


def _sweep_setup(args):
    out, manifest = _prepare(args)
    config = resolve_config(args, manifest)
    write_run_manifest(out, args.command, args.data, config)
    data = PreparedData.from_manifest(manifest)
    return out, data, _finalize(config, data)


def cmd_ablate(args):
    out, data, config = _sweep_setup(args)
    rows = run_ablation(data, config, args.variants, args.horizons, jobs=args.jobs)
    write_records(out / "ablation.jsonl", rows)
    _say(format_table(rows, ["variant", "horizon", "mse", "mae"]))
    return 0


def cmd_mask_sweep(args):
    out, data, config = _sweep_setup(args)
    result = mask_sweep(data, config, args.ratios)
    rows = [{"ratio": r, **m} for r, m in result.items()]
    write_records(out / "mask_sweep.jsonl", rows)
    _say(format_table(rows, ["ratio", "mse", "mae"]))
    return 0


def cmd_lookback_sweep(args):
    out, data, config = _sweep_setup(args)
    rows = lookback_sweep(data, config, args.exo_lengths, args.horizons, jobs=args.jobs)
    write_records(out / "lookback_sweep.jsonl", rows)
    _say(format_table(rows, ["exo_lookback", "horizon", "mse", "mae"]))
    return 0


def cmd_patch_sweep(args):
    out, data, config = _sweep_setup(args)
    rows, averaged, spread = patch_length_sweep(data, config, args.patch_lengths, args.horizons, jobs=args.jobs)
    write_records(out / "patch_sweep.jsonl", rows + averaged + [{"spread_ratio": spread}])
    _say(format_table(averaged, ["patch", "horizon", "mse", "mae"]))
    _say(f"max/min averaged MSE: {spread:.4f}")
    return 0


def cmd_cka(args):
    out, data, params, config = _load_for_checkpoint(args)
    windows = data.windows_for(config, splits=("test",))
    if "test" not in windows:
        raise DataError("test split has no windows")
    reps = collect_representations(params, config, windows["test"], args.samples, args.tokens)
    matrix = cka_matrix(reps)
    labels = ["embedding"] + [f"block_{i + 1}" for i in range(len(reps) - 1)]
    lines = ["layer," + ",".join(labels)]
    lines += [labels[i] + "," + ",".join(repr(float(v)) for v in row) for i, row in enumerate(matrix)]
    (out / "cka.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _say("\n".join(lines))
    _say(f"first/last CKA: {first_last_similarity(matrix):.4f}")
    return 0


def cmd_attn_map(args):
    out, data, params, config = _load_for_checkpoint(args)
    windows = data.windows_for(config, splits=(args.split,))
    if args.split not in windows or not 0 <= args.index < len(windows[args.split]):
        raise DataError(f"no window {args.index} in split {args.split!r}")
    export = attention_for_sample(params, config, windows[args.split][args.index], data.roles.exo)
    header = {"names": ",".join(export.names), "split": args.split, "index": args.index}
    write_arrays(out / "attention.txer", export.arrays(), header)
    rows = export.summary()
    write_records(out / "attention.jsonl", rows)
    for r in rows:
        _say(f"layer {r['layer']}: highest {r['argmax']} ({r['argmax_weight']:.4f}), "
             f"lowest {r['argmin']} ({r['argmin_weight']:.4f})")
    return 0


def cmd_synth_data(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = synth_causal_dataset(args.T, args.C, args.lag, args.noise, args.seed,
                                 seasonal=args.seasonal, harmonics=args.harmonics)
    split = SplitSpec.parse(args.split)
    table.to_csv(out / "synth.csv")
    DataManifest(path="synth.csv", endo="target", exo="all_others", split=split).write(out / "manifest.txt")
    _say(f"wrote {out / 'synth.csv'} ({len(table)} rows) and {out / 'manifest.txt'}")
    return 0


def cmd_multivariate(args):
    out, manifest = _prepare(args)
    config = resolve_config(args, manifest)
    if config.exo_lookback not in (0, config.lookback):
        raise ConfigError("multivariate mode requires exo_lookback == lookback")
    write_run_manifest(out, "multivariate", args.data, config)
    data = PreparedData.from_manifest(manifest)
    columns = [data.roles.endo, *data.roles.exo]
    if config.per_series_exo:
        raise ConfigError("per_series_exo is not supported with a channel-shared multivariate model")
    windows = multivariate_windows(data.table, config.lookback, config.horizon, data.split, config.stride, columns)
    params, report = train(init_params(config), config, windows["train"], windows["val"])
    write_records(out / "train_log.jsonl", [
        {"epoch": r.epoch, "train_mse": r.train_mse, "val_mse": r.val_mse} for r in report.epochs
    ] + [report.summary()])
    save_checkpoint(out / "checkpoint.txer", params, config.resolved())
    test = windows["test"]
    pred = predict(params, config, test)
    n_vars = len(columns)
    rows = [{"variable": "all", **metrics(pred, test.target)}]
    for v, name in enumerate(columns):
        rows.append({"variable": name, **metrics(pred[v::n_vars], test.target[v::n_vars])})
    write_records(out / "metrics.jsonl", rows)
    _say(format_table(rows, ["variable", "mse", "mae"]))
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
    "ablate": cmd_ablate,
    "mask-sweep": cmd_mask_sweep,
    "lookback-sweep": cmd_lookback_sweep,
    "patch-sweep": cmd_patch_sweep,
    "cka": cmd_cka,
    "attn-map": cmd_attn_map,
    "synth-data": cmd_synth_data,
    "multivariate": cmd_multivariate,
}


def dispatch(argv=None):
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except HANDLED as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


def main(argv=None):
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
