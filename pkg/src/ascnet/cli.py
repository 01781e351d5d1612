"""Command-line front end: prepare, train, eval, denoise, report.

Exit codes: 0 ok, 2 bad arguments or missing inputs, 3 record parse
errors, 4 training divergence, 5 config mismatch, 6 report schema mismatch.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    ChannelOutOfRange,
    ConfigMismatch,
    Divergence,
    InsufficientRecords,
    InvalidConfig,
    MalformedHeader,
    ResolutionMismatch,
    SignalTooShort,
    TruncatedFile,
    UnsupportedFormat,
    ZeroGain,
)
from .model import ASCNet, ModelConfig
from .signals import (
    METRICS_COLUMNS,
    RECORD_NOISE_KINDS,
    MetricsReport,
    NoiseSpec,
    build_dataset,
    denormalize,
    load_segment_set,
    normalize,
    save_segment_set,
    write_csv,
)
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train
from .wfdb_io import load_record

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_DIVERGED, EXIT_CONFIG, EXIT_SCHEMA = 0, 2, 3, 4, 5, 6
PARSE_ERRORS = (MalformedHeader, UnsupportedFormat, TruncatedFile, ZeroGain, ChannelOutOfRange)
SPLITS = ("train", "val", "test")
REPORT_COLUMNS = ("method",) + METRICS_COLUMNS


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers

def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("ASCNET_THREADS", "1")))
    except ValueError:
        return 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_manifest(out_dir: Path, command: str, config: dict, seeds: dict, inputs: list,
                   config_path: str | None = None) -> None:
    """One manifest per output directory; everything but the timestamp is reproducible."""
    manifest = {
        "command": command,
        "config_path": config_path,
        "config": config,
        "seeds": seeds,
        "inputs": {os.fspath(p): sha256_file(p) for p in sorted(inputs, key=os.fspath)},
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    atomic_write_text(out_dir / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_json_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_USAGE, f"config file not found: {path}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_USAGE, f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise CliError(EXIT_USAGE, f"{path}: expected a JSON object")
    return data


def build_config(cls, base: dict, overrides: dict, source: str):
    merged = {**base, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return cls(**merged)
    except TypeError as exc:
        raise CliError(EXIT_USAGE, f"{source}: {exc}") from None
    except (ValueError, InvalidConfig) as exc:
        raise CliError(EXIT_USAGE, f"{source}: {exc}") from None


def parse_float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated number list: {text!r}") from None


def parse_split(text: str) -> tuple[float, float, float]:
    vals = parse_float_list(text)
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("--split needs three fractions A,B,C")
    return tuple(vals)


def family_name(spec: NoiseSpec) -> str:
    return f"{spec.label}_{spec.target_snr_db:g}dB"


def load_noise_sources(noise_dir: str | None, kinds: set[str]) -> dict[str, np.ndarray]:
    """Noise records are looked up as ``<noise-dir>/<kind>.hea`` (bw, em, ma)."""
    needed = sorted(kinds & set(RECORD_NOISE_KINDS))
    if not needed:
        return {}
    if noise_dir is None:
        raise CliError(EXIT_USAGE, f"--noise-dir is required for noise kinds {','.join(needed)}")
    sources = {}
    for kind in needed:
        path = Path(noise_dir) / f"{kind}.hea"
        if not path.is_file():
            raise CliError(EXIT_PARSE, f"noise record '{kind}' not found: {path}")
        sources[kind] = load_record(path, 0).samples_mv
    return sources


# ---------------------------------------------------------------- prepare

def cmd_prepare(args) -> int:
    rec_dir = Path(args.records)
    if not rec_dir.is_dir():
        raise CliError(EXIT_USAGE, f"records directory not found: {rec_dir}")
    headers = sorted(rec_dir.glob("*.hea"))
    if not headers:
        raise CliError(EXIT_USAGE, f"no .hea files in {rec_dir}")
    kinds = [k.strip().lower() for k in args.noise.split(",") if k.strip()]
    try:
        probe = [NoiseSpec(k, 0.0) for k in kinds]
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"--noise: {exc}") from None
    sources = load_noise_sources(args.noise_dir, {c for s in probe for c in s.components})
    records = [load_record(h, args.channel) for h in headers]
    specs = [NoiseSpec(k, snr, sources) for k in kinds for snr in args.snr]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(spec):
        fam = out / family_name(spec)
        fam.mkdir(exist_ok=True)
        sets = build_dataset(records, [spec], args.L, args.stride, args.split, args.seed)
        for name in SPLITS:
            save_segment_set(sets[name], fam / f"{name}.seg")
        return fam, {name: len(sets[name]) for name in SPLITS}

    with ThreadPoolExecutor(max_workers=min(max_workers(), len(specs))) as pool:
        results = list(pool.map(one, specs))
    noise_inputs = [Path(args.noise_dir) / f"{k}.{ext}" for k in sorted(sources) for ext in ("hea", "dat")]
    inputs = headers + [h.with_suffix(".dat") for h in headers if h.with_suffix(".dat").exists()] + noise_inputs
    config = {
        "records": os.fspath(rec_dir), "noise_dir": args.noise_dir, "noise": kinds, "snr": args.snr,
        "L": args.L, "stride": args.stride, "split": list(args.split), "channel": args.channel,
        "families": {fam.name: counts for fam, counts in results},
    }
    write_manifest(out, "prepare", config, {"dataset": args.seed}, inputs)
    for fam, counts in results:
        print(f"{fam.name}: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


# ---------------------------------------------------------------- train

def _load_split(data: Path, name: str):
    path = data / f"{name}.seg"
    if not path.is_file():
        raise CliError(EXIT_USAGE, f"missing {name} split: {path}")
    return load_segment_set(path)


def cmd_train(args) -> int:
    data = Path(args.data)
    if not data.is_dir():
        raise CliError(EXIT_USAGE, f"data directory not found: {data}")
    model_cfg = build_config(ModelConfig, read_json_config(args.model_config), {}, "model config")
    train_cfg = build_config(TrainConfig, read_json_config(args.train_config), {
        "max_epochs": args.epochs, "batch_size": args.batch_size,
        "learning_rate": args.lr, "seed": args.seed,
    }, "train config")
    train_set, val_set = _load_split(data, "train"), _load_split(data, "val")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = None if args.quiet else print
    try:
        ckpt, history = train(train_set, val_set, model_cfg, train_cfg, log=log)
    except Divergence as exc:
        raise CliError(EXIT_DIVERGED, str(exc)) from None
    except ConfigMismatch as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    save_checkpoint(ckpt, out / "checkpoint.bin")
    write_csv(out / "loss_history.csv", ("epoch", "train_loss", "val_loss"), history)
    config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": os.fspath(data),
              "best_epoch": ckpt.best_epoch}
    write_manifest(out, "train", config, {"train": train_cfg.seed},
                   [data / f"{s}.seg" for s in ("train", "val")],
                   config_path=args.train_config)
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _test_families(data: Path) -> list[Path]:
    if (data / "test.seg").is_file():
        return [data]
    fams = sorted(p for p in data.iterdir() if (p / "test.seg").is_file())
    if not fams:
        raise CliError(EXIT_USAGE, f"no test.seg under {data}")
    return fams


def pivot_table(report: MetricsReport) -> tuple[list[str], list[dict]]:
    """Records as rows, one snr_out/rmse column pair per (noise, SNR), plus a mean row."""
    levels = sorted({(r["noise_kind"], r["input_snr_db"]) for r in report.rows})
    cols = ["record_id"]
    for kind, snr in levels:
        cols += [f"{kind}_{snr:g}dB_snr_out", f"{kind}_{snr:g}dB_rmse"]
    table: dict[str, dict] = {}
    for r in report.rows:
        row = table.setdefault(r["record_id"], {"record_id": r["record_id"]})
        row[f"{r['noise_kind']}_{r['input_snr_db']:g}dB_snr_out"] = r["snr_out_db"]
        row[f"{r['noise_kind']}_{r['input_snr_db']:g}dB_rmse"] = r["rmse"]
    rows = [table[k] for k in sorted(table)]
    mean = {"record_id": "mean"}
    for agg in report.aggregates:
        mean[f"{agg['noise_kind']}_{agg['input_snr_db']:g}dB_snr_out"] = agg["snr_out_db"]
        mean[f"{agg['noise_kind']}_{agg['input_snr_db']:g}dB_rmse"] = agg["rmse"]
    rows.append(mean)
    return cols, [{c: r.get(c, "") for c in cols} for r in rows]


def cmd_eval(args) -> int:
    data = Path(args.data)
    if not data.is_dir():
        raise CliError(EXIT_USAGE, f"data directory not found: {data}")
    ckpt = None
    if args.checkpoint is not None:
        if not Path(args.checkpoint).is_file():
            raise CliError(EXIT_USAGE, f"checkpoint not found: {args.checkpoint}")
        ckpt = load_checkpoint(args.checkpoint)
    elif args.stub is None:
        raise CliError(EXIT_USAGE, "eval needs --checkpoint or --stub")
    fams = _test_families(data)

    def one(fam):
        test = load_segment_set(fam / "test.seg")
        if args.stub == "clean":
            return evaluate(None, test, denoiser=lambda noisy: test.arrays()[1]).rows
        if args.stub == "noisy":
            return evaluate(None, test, denoiser=lambda noisy: noisy).rows
        return evaluate(ckpt, test).rows

    try:
        with ThreadPoolExecutor(max_workers=min(max_workers(), len(fams))) as pool:
            rows = [r for chunk in pool.map(one, fams) for r in chunk]
    except ConfigMismatch as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    report = MetricsReport(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "metrics.csv")
    write_csv(out / "aggregates.csv",
              ("noise_kind", "input_snr_db", "n_records") + METRICS_COLUMNS[3:], report.aggregates)
    cols, table = pivot_table(report)
    write_csv(out / "table.csv", cols, table)
    label = args.label or (f"stub-{args.stub}" if args.stub else "ascnet")
    inputs = [f / "test.seg" for f in fams] + ([Path(args.checkpoint)] if args.checkpoint else [])
    write_manifest(out, "eval", {"label": label, "stub": args.stub, "data": os.fspath(data)}, {}, inputs)
    for agg in report.aggregates:
        print(f"{agg['noise_kind']} {agg['input_snr_db']:g} dB: snr_out {agg['snr_out_db']:.3f} "
              f"snr_imp {agg['snr_imp_db']:.3f} rmse {agg['rmse']:.5f} prd {agg['prd_percent']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- denoise

def triangular_weights(length: int) -> np.ndarray:
    half = length // 2
    rise = (np.arange(half) + 0.5) / half
    return np.concatenate([rise, rise[::-1]]) if length % 2 == 0 else \
        np.concatenate([rise, [1.0], rise[::-1]])


def window_starts(n: int, length: int) -> list[int]:
    hop = max(1, length // 2)
    starts = list(range(0, n - length + 1, hop))
    if starts[-1] != n - length:
        starts.append(n - length)  # last window flush with the end
    return starts


def stitch(signal: np.ndarray, length: int, denoise_batch) -> np.ndarray:
    """Denoise overlapping windows and blend them with triangular weights."""
    n = len(signal)
    x = signal if n >= length else np.pad(signal, (0, length - n), mode="edge")
    starts = window_starts(len(x), length)
    windows, stats = [], []
    for s in starts:
        y, mean, scale = normalize(x[s:s + length])
        windows.append(y)
        stats.append((mean, scale))
    outs = denoise_batch(np.stack(windows)[:, None, :])[:, 0, :]
    w = triangular_weights(length)
    acc = np.zeros(len(x))
    wsum = np.zeros(len(x))
    for s, out, (mean, scale) in zip(starts, outs, stats):
        acc[s:s + length] += w * denormalize(out, mean, scale)
        wsum[s:s + length] += w
    return (acc / wsum)[:n]


def cmd_denoise(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise CliError(EXIT_USAGE, f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    rec = load_record(args.record, args.channel)
    model = ASCNet(ckpt.model_config, ckpt.eval_params.copy())
    denoised = stitch(rec.samples_mv, ckpt.model_config.segment_length, model.predict)
    rows = ({"sample_index": i, "input_mv": float(a), "denoised_mv": float(b)}
            for i, (a, b) in enumerate(zip(rec.samples_mv, denoised)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, ("sample_index", "input_mv", "denoised_mv"), rows)
    hea = Path(args.record if str(args.record).endswith(".hea") else f"{args.record}.hea")
    write_manifest(out.parent, "denoise", {"record": os.fspath(hea), "channel": args.channel,
                                          "output": out.name}, {},
                   [hea, Path(args.checkpoint)])
    return EXIT_OK


# ---------------------------------------------------------------- report

def _eval_label(d: Path) -> str:
    m = d / "manifest.json"
    if m.is_file():
        try:
            return json.loads(m.read_text())["config"]["label"]
        except (KeyError, TypeError, json.JSONDecodeError):
            pass
    return d.name


def cmd_report(args) -> int:
    if not args.eval:
        raise CliError(EXIT_USAGE, "report needs at least one --eval directory")
    merged: dict[tuple, dict] = {}
    inputs = []
    for d in map(Path, args.eval):
        path = d / "metrics.csv"
        if not path.is_file():
            raise CliError(EXIT_USAGE, f"no metrics.csv in {d}")
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
                raise CliError(EXIT_SCHEMA, f"{path}: columns {reader.fieldnames} do not match "
                                            f"{','.join(METRICS_COLUMNS)}")
            label = _eval_label(d)
            for r in reader:
                key = (label, r["noise_kind"], float(r["input_snr_db"]), r["record_id"])
                merged.setdefault(key, {"method": label, **r})
        inputs.append(path)
    rows = [merged[k] for k in sorted(merged)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, REPORT_COLUMNS, rows)
    write_manifest(out.parent, "report", {"eval": [os.fspath(p) for p in args.eval],
                                         "output": out.name}, {}, inputs)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ascnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="segment records and inject noise")
    sp.add_argument("--records", required=True)
    sp.add_argument("--noise-dir")
    sp.add_argument("--noise", default="awgn", help="comma list, mixtures joined with '+'")
    sp.add_argument("--snr", type=parse_float_list, default=[5.0])
    sp.add_argument("--L", type=int, default=1024)
    sp.add_argument("--stride", type=int, default=512)
    sp.add_argument("--split", type=parse_split, default=(0.8, 0.1, 0.1))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--channel", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train on a prepared family directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model-config")
    sp.add_argument("--train-config")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--quiet", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="metrics on test splits")
    sp.add_argument("--checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--stub", choices=("clean", "noisy"))
    sp.add_argument("--label")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("denoise", help="denoise a whole record")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--record", required=True)
    sp.add_argument("--channel", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_denoise)

    sp = sub.add_parser("report", help="merge eval outputs")
    sp.add_argument("--eval", nargs="*", default=[])
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"ascnet {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except PARSE_ERRORS as exc:
        print(f"ascnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except FileNotFoundError as exc:
        print(f"ascnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InsufficientRecords, SignalTooShort) as exc:
        print(f"ascnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigMismatch, ResolutionMismatch) as exc:
        print(f"ascnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
