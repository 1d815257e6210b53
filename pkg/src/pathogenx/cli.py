"""Command-line entry point: ``pathogenx <subcommand> ...``.

Configuration is a plain ``key = value`` file (``#`` starts a comment) whose
values can be overridden with ``--set key=value`` or the dedicated flags.
Every output file starts with ``#`` comment lines echoing the resolved
configuration.

Exit codes: 0 success, 1 validation or configuration error, 2 IO error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import ManifestError, SynthConfig, generate_synthetic, load_manifest, outcomes, save_dataset
from .gradcheck import TOLERANCE, run_all
from .survival import c_index, km_estimate, log_rank, stratify_by_median, write_km_csv
from .train import (
    METHODS,
    PathoGenX,
    TrainConfig,
    Trainer,
    ablation_alignment,
    cross_validate,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    translation_correlation,
    write_ablation_csv,
    write_log,
)

logger = logging.getLogger("pathogenx")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# key = value configuration


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(key: str, value: str, default):
    try:
        if isinstance(default, bool):
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {type(default).__name__}") from None
    return value


def resolve_config(schema, file_path: str | None, overrides: dict[str, str]):
    """Build ``schema`` (a dataclass) from file values, then flag overrides."""
    values: dict[str, str] = {}
    if file_path is not None:
        values.update(parse_config_text(Path(file_path).read_text(), file_path))
    values.update(overrides)
    defaults = schema()
    known = {f.name for f in fields(schema)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown} for {schema.__name__}; known keys: {sorted(known)}")
    kwargs = {k: _convert(k, v, getattr(defaults, k)) for k, v in values.items()}
    try:
        return schema(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def config_header(command: str, config=None, **extra) -> list[str]:
    lines = [f"pathogenx {__version__} {command}"]
    for key, value in extra.items():
        lines.append(f"{key} = {value}")
    if config is not None:
        lines += [f"{f.name} = {getattr(config, f.name)}" for f in fields(config)]
    return lines


def _overrides(args, names: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = str(value)
    return out


# ---------------------------------------------------------------------------
# Subcommands


def cmd_generate(args) -> int:
    cfg = resolve_config(SynthConfig, args.config, _overrides(args, ["seed"]))
    records = generate_synthetic(cfg)
    manifest = save_dataset(records, args.out_dir, config_header("generate", cfg))
    print(f"wrote {len(records)} patients to {manifest}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return resolve_config(TrainConfig, args.config, _overrides(args, ["seed", "epochs"]))


def cmd_train(args) -> int:
    cfg = _train_config(args)
    records = load_manifest(args.manifest, with_genomic=args.method != "meanmil")
    if args.resume:
        trainer = load_checkpoint(args.resume, records, cfg)
        if trainer.method.name != args.method:
            raise ConfigError(f"{args.resume}: checkpoint holds a {trainer.method.name} model, not {args.method}")
    else:
        trainer = Trainer.create(args.method, records, cfg)
    log_rows = trainer.fit(records)
    save_checkpoint(args.out, trainer)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.csv")
    header = config_header("train", cfg, method=args.method, manifest=args.manifest, resume=args.resume or "")
    write_log(log_path, log_rows, header)
    print(f"trained {args.method} to epoch {trainer.epoch}; checkpoint {args.out}, log {log_path}")
    return EXIT_OK


def _checkpoint_method(path) -> str:
    return read_checkpoint(path)["meta"]["method"]


def cmd_eval(args) -> int:
    method = _checkpoint_method(args.checkpoint)
    # Image-only methods never open the genomic files.
    records = load_manifest(args.manifest, with_genomic=method == "genomic-cox")
    trainer = load_checkpoint(args.checkpoint, records)
    risks = trainer.predict(records)
    times, events = outcomes(records)
    c = c_index(risks, times, events)
    lines = [f"# {h}" for h in config_header("eval", manifest=args.manifest, checkpoint=args.checkpoint, method=method)]
    lines.append("patient_id,risk")
    lines += [f"{r.id},{float(risk)!r}" for r, risk in zip(records, risks)]
    lines.append(f"# c_index,{c!r}")
    Path(args.report).write_text("\n".join(lines) + "\n")
    print(f"c-index {c:.4f} over {len(records)} patients; report {args.report}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = _train_config(args)
    needs_genomic = args.method != "meanmil"
    records = load_manifest(args.manifest, with_genomic=needs_genomic)
    header = config_header(
        "crossval", cfg, manifest=args.manifest, method=args.method, folds=args.folds, ablation=args.ablation
    )
    if args.ablation:
        if args.method != "pathogenx":
            raise ConfigError("--ablation applies to --method pathogenx only")
        results = ablation_alignment(records, cfg, k=args.folds)
        write_ablation_csv(args.out, results, header)
        for label, res in results.items():
            print(f"{label}: {res.mean:.4f} +/- {res.std:.4f}")
        return EXIT_OK
    result = cross_validate(records, cfg, args.method, k=args.folds)
    lines = [f"# {h}" for h in header] + ["fold,c_index"]
    lines += [f"{label},{value!r}" for label, value in result.rows()]
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"{args.method}: {result.mean:.4f} +/- {result.std:.4f}")
    return EXIT_OK


def read_risks(path) -> dict[str, float]:
    out: dict[str, float] = {}
    header_seen = False
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if not header_seen:
            if parts != ["patient_id", "risk"]:
                raise ConfigError(f"{path}:{lineno}: expected header 'patient_id,risk'")
            header_seen = True
            continue
        if len(parts) != 2:
            raise ConfigError(f"{path}:{lineno}: expected 2 fields, got {len(parts)}")
        try:
            out[parts[0]] = float(parts[1])
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: risk {parts[1]!r} is not a number") from None
    return out


def cmd_km(args) -> int:
    risks_by_id = read_risks(args.risks)
    records = load_manifest(args.manifest, with_genomic=False)
    missing = [r.id for r in records if r.id not in risks_by_id]
    if missing:
        raise ConfigError(f"{args.risks}: no risk for patient(s) {missing[:5]}")
    risks = np.array([risks_by_id[r.id] for r in records])
    if np.all(risks == risks[0]):
        raise ConfigError("cannot stratify constant risks")
    groups = stratify_by_median(risks)
    if len(set(groups)) < 2:
        raise ConfigError("cannot stratify: every patient falls in one risk group")
    times, events = outcomes(records)
    low, high = groups == "low", groups == "high"
    curves = {
        "low": km_estimate(times[low], events[low]),
        "high": km_estimate(times[high], events[high]),
    }
    result = log_rank(times[low], events[low], times[high], events[high])
    write_km_csv(args.out, curves, result, config_header("km", risks=args.risks, manifest=args.manifest))
    print(f"log-rank chi2 {result.chi2:.4f}, p {result.p:.3g}; curves {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all(args.seed, args.tolerance)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max_rel_err {r.error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_correlate(args) -> int:
    records = load_manifest(args.manifest)
    trainer = load_checkpoint(args.checkpoint, records)
    if not isinstance(trainer.method, PathoGenX):
        raise ConfigError(f"{args.checkpoint}: correlation needs a pathogenx checkpoint")
    result = translation_correlation(trainer.method.params, records)
    header = config_header("correlate", manifest=args.manifest, checkpoint=args.checkpoint)
    lines = [f"# {h}" for h in header] + ["features,mean_abs_r"]
    lines += [f"class_token,{result.before!r}", f"translated,{result.after!r}"]
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"mean |r| before {result.before:.4f}, after {result.after:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors (exit 1); 2 is reserved for IO."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pathogenx", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("generate", help="write a synthetic paired cohort")
    with_config(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model on a manifest")
    with_config(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    p.add_argument("--method", choices=METHODS, default="pathogenx")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="image-only risks and C-index")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="k-fold cross-validation")
    with_config(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=METHODS, default="pathogenx")
    p.add_argument("--ablation", action="store_true", help="alignment-loss ablation table")
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("km", help="median-risk Kaplan-Meier curves and log-rank test")
    p.add_argument("--risks", required=True, help="CSV with patient_id,risk (as written by eval)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_km)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("correlate", help="class-token vs translated correlation with genomics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correlate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc.__cause__, OSError) else EXIT_INVALID
    except OSError as exc:
        where = f": {exc.filename}" if exc.filename else ""
        print(f"error: {exc.strerror or exc}{where}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:  # ConfigError, MissingGenomicError, CheckpointError, ...
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
