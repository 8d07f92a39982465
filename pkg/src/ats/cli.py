"""Command-line entry point.

Commands: gen-data, train, eval, ablate, sweep, rsa, export-attention.
Run ``ats <command> --help`` for the flags of each one.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from fractions import Fraction
from pathlib import Path

from . import __version__
from .adapter import AdapterConfig
from .core_math import NonFiniteError, Rng, digest_of
from .encoder import EncoderConfig, export_attention_csv, init_encoder
from .evaluation import evaluate_retrieval
from .experiments import RECIPES, Configs, ExperimentError, apply_overrides, desk_configs, rsa_triptych, run_experiment, write_results
from .synthetic_data import SPLITS, TEST, VAL, FeatureFormatError, GenConfig, generate, load_bundle, save_bundle
from .trainer import (
    CheckpointError,
    CheckpointVersionError,
    TrainConfig,
    TrainingDivergedError,
    architecture_digest,
    checkpoint_digest,
    embed,
    evaluate_split,
    history_csv,
    load_checkpoint,
    read_history_csv,
    save_checkpoint,
    train,
)

log = logging.getLogger("ats")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_COMPAT = 5

EXIT_CODES_HELP = """exit codes:
  0  success
  2  configuration error (bad JSON, unknown key, invalid value)
  3  I/O error (missing or malformed file, refusing to overwrite a non-empty directory)
  4  numeric failure (non-finite loss during training)
  5  compatibility error (checkpoint architecture or version does not match)
"""

DEFAULT_OUTPUTS = {"checkpoint": "checkpoint.atsc", "history": "history.csv", "report": "val_report.json"}
ABLATIONS = ("residual", "components", "attention")
SWEEPS = ("ratio", "lambda")


class ConfigError(Exception):
    pass


class OutputExistsError(Exception):
    pass


class CompatibilityError(Exception):
    pass


# ---------------------------------------------------------------------------
# run config


def _field_names(cls, drop=()) -> set[str]:
    return {f.name for f in fields(cls)} - set(drop)


SECTION_KEYS = {
    "gen": _field_names(GenConfig),
    "adapter": _field_names(AdapterConfig, drop=("in_dim",)) | {"ratio"},
    "encoder": _field_names(EncoderConfig, drop=("channels", "time_steps")),
    "train": _field_names(TrainConfig),
    "outputs": set(DEFAULT_OUTPUTS),
}


def load_run_config(path) -> dict:
    """Read and validate a run config. Missing sections mean defaults."""
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    validate_run_config(doc, str(p))
    return doc


def validate_run_config(doc, where: str = "config") -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: top level must be a JSON object")
    unknown = set(doc) - set(SECTION_KEYS)
    if unknown:
        raise ConfigError(f"{where}: unknown section(s) {sorted(unknown)}; allowed {sorted(SECTION_KEYS)}")
    for name, body in doc.items():
        if not isinstance(body, dict):
            raise ConfigError(f"{where}: section {name!r} must be an object")
        bad = set(body) - SECTION_KEYS[name]
        if bad:
            raise ConfigError(f"{where}: unknown key(s) in {name!r}: {sorted(bad)}")


def build_configs(doc: dict, gen: GenConfig | None = None, base: Configs | None = None) -> Configs:
    """Turn a validated run config into concrete configs.

    ``gen`` (the config of an existing dataset) takes precedence over the
    document's own ``gen`` section.
    """
    overrides = {}
    for section in ("gen", "adapter", "encoder", "train"):
        for key, value in doc.get(section, {}).items():
            if section == "adapter" and key == "ratio":
                value = Fraction(str(value))
            overrides[f"{section}.{key}"] = value
    if gen is not None:
        overrides = {k: v for k, v in overrides.items() if not k.startswith("gen.")}
    try:
        if base is None:
            base = desk_configs(gen) if gen is not None else desk_configs()
        elif gen is not None:
            base = Configs(gen, base.adapter, base.encoder, base.train)
        return apply_overrides(base, overrides)
    except (ValueError, TypeError, KeyError, ZeroDivisionError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def run_digest(adapter, encoder, train_config) -> str:
    return digest_of({"adapter": adapter.to_dict(), "encoder": encoder.to_dict(), "train": train_config.to_dict()})


def prepare_out_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists():
        if not out.is_dir():
            raise OutputExistsError(f"output path {out} exists and is not a directory")
        if any(out.iterdir()) and not force:
            raise OutputExistsError(f"output directory {out} is not empty; pass --force to write into it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_data(path):
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"data directory {p} does not exist")
    return load_bundle(p)


def _check_data_fits(state, ds) -> None:
    if ds.teacher_features.shape[1] != state.adapter_config.in_dim:
        raise CompatibilityError(
            f"checkpoint adapter expects {state.adapter_config.in_dim}-dim teacher features, data has {ds.teacher_features.shape[1]}"
        )
    shape = (state.encoder_config.channels, state.encoder_config.time_steps)
    if ds.student_signals.shape[1:] != shape:
        raise CompatibilityError(f"checkpoint encoder expects signals of shape {shape}, data has {ds.student_signals.shape[1:]}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    doc = load_run_config(args.config)
    try:
        gen = GenConfig.from_dict(doc.get("gen", {}))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid gen config: {exc}") from exc
    out = prepare_out_dir(args.out, args.force)
    ds = generate(gen)
    save_bundle(ds, out)
    sizes = {s: int(ds.indices(s).size) for s in SPLITS}
    _emit(
        {
            "config_digest": digest_of(gen.to_dict()),
            "out": str(out),
            "classes": {"seen": gen.n_seen_classes, "unseen": gen.n_unseen_classes},
            "samples": int(ds.labels.size),
            "splits": sizes,
        }
    )
    return EXIT_OK


def cmd_train(args) -> int:
    doc = load_run_config(args.config)
    ds = _load_data(args.data)
    cfg = build_configs(doc, gen=ds.config) if ds.config is not None else build_configs(doc)
    outputs = {**DEFAULT_OUTPUTS, **doc.get("outputs", {})}
    state = None
    prior: list[dict] = []
    if args.resume:
        state = load_checkpoint(args.resume)
        if state.arch_digest != architecture_digest(cfg.adapter, cfg.encoder):
            raise CompatibilityError("checkpoint architecture does not match the supplied config")
        hist_path = Path(args.resume).parent / outputs["history"]
        if hist_path.exists():
            prior = [r for r in read_history_csv(hist_path) if r["epoch"] < state.epoch]
    out = prepare_out_dir(args.out, args.force or bool(args.resume))
    state, history = train(ds, cfg.adapter, cfg.encoder, cfg.train, state=state, stop_after=args.stop_after)
    digest = run_digest(cfg.adapter, cfg.encoder, cfg.train)
    history = prior + history
    save_checkpoint(state, out / outputs["checkpoint"])
    (out / outputs["history"]).write_text(history_csv(history, digest))
    report = evaluate_split(state, ds, VAL)
    summary = {
        "config_digest": digest,
        "checkpoint_digest": checkpoint_digest(state),
        "epochs_run": state.epoch,
        "best_epoch": state.best_epoch,
        "split": VAL,
        "report": report.to_dict(),
    }
    _write_json(out / outputs["report"], summary)
    _emit({k: v for k, v in summary.items() if k != "report"} | {"val_top1": report.top1, "history_rows": len(history)})
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} does not exist")
    state = load_checkpoint(ckpt)
    ds = _load_data(args.data)
    if args.config:
        doc = load_run_config(args.config)
        cfg = build_configs(doc, gen=ds.config) if ds.config is not None else build_configs(doc)
        if architecture_digest(cfg.adapter, cfg.encoder) != state.arch_digest:
            raise CompatibilityError(
                f"architecture digest of {args.config} does not match checkpoint {ckpt}"
            )
    _check_data_fits(state, ds)
    sub = ds.subset(args.split)
    Zv, Zb = embed(state, sub.teacher_features, sub.student_signals, best=not args.current)
    report = evaluate_retrieval(Zb, Zv, sub.labels, sub.image_index)
    doc = {
        "config_digest": run_digest(state.adapter_config, state.encoder_config, state.train_config),
        "checkpoint_digest": checkpoint_digest(state),
        "split": args.split,
        "report": report.to_dict(),
    }
    out = Path(args.out) if args.out else ckpt.parent / f"report-{args.split}.json"
    _write_json(out, doc)
    _emit(doc)
    return EXIT_OK


def _experiment(args, recipe: str) -> int:
    doc = load_run_config(args.config)
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else None
    try:
        spec = RECIPES[recipe](seeds) if seeds else RECIPES[recipe]()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if doc:
        spec = type(spec)(spec.name, build_configs(doc, base=spec.base), spec.cells, spec.seeds)
    out = prepare_out_dir(args.out, args.force)
    result = run_experiment(spec, jobs=args.jobs)
    root = write_results(result, out)
    cells = {}
    for c in spec.cells:
        top1 = result.top1(c.name)
        cells[c.name] = {"top1": [float(x) for x in top1], "mean_top1": float(top1.mean())}
    if len(spec.seeds) >= 2:
        for name, st in result.stats().items():
            cells[name]["stats"] = st.to_dict()
    _emit({"experiment": spec.name, "out": str(root), "config_digest": spec.base.digest(), "seeds": list(spec.seeds), "cells": cells})
    return EXIT_OK


def cmd_ablate(args) -> int:
    return _experiment(args, args.recipe)


def cmd_sweep(args) -> int:
    return _experiment(args, args.recipe)


def cmd_rsa(args) -> int:
    state = load_checkpoint(args.checkpoint)
    ds = _load_data(args.data)
    _check_data_fits(state, ds)
    out = prepare_out_dir(args.out, args.force)
    tri = rsa_triptych(state, ds, args.split, best=not args.current)
    digest = run_digest(state.adapter_config, state.encoder_config, state.train_config)
    files = {}
    for name, rsm in tri.items():
        files[name] = str(rsm.to_csv(out / f"{name}.csv", digest))
    margins = {}
    for name, rsm in tri.items():
        within, across = rsm.within_across()
        margins[name] = {"within": within, "across": across, "margin": within - across}
    doc = {"config_digest": digest, "split": args.split, "files": files, "margins": margins}
    _write_json(out / "rsa_margins.json", doc)
    _emit(doc)
    return EXIT_OK


def cmd_export_attention(args) -> int:
    if bool(args.checkpoint) == bool(args.config):
        raise ConfigError("export-attention needs exactly one of --checkpoint or --config")
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
        if not state.encoder_config.use_temporal_attention:
            raise CompatibilityError("checkpoint encoder has temporal attention disabled")
        params = state.encoder_params(best=not args.current)
        digest = run_digest(state.adapter_config, state.encoder_config, state.train_config)
    else:
        cfg = build_configs(load_run_config(args.config))
        params = init_encoder(cfg.encoder, Rng(cfg.train.seed).child("encoder"))
        digest = run_digest(cfg.adapter, cfg.encoder, cfg.train)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_attention_csv(params, out, digest)
    _emit({"config_digest": digest, "out": str(out)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="ats",
        description="Asymmetric teacher/student alignment on synthetic paired data.",
        epilog=EXIT_CODES_HELP,
        formatter_class=fmt,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=EXIT_CODES_HELP, formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "Generate a synthetic dataset bundle.")
    p.add_argument("--config", help="run config JSON (only the 'gen' section is used)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    p = add("train", cmd_train, "Train adapter and encoder on a dataset bundle.")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--data", required=True, help="dataset bundle directory")
    p.add_argument("--out", required=True, help="output directory for checkpoint, history and report")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from this checkpoint")
    p.add_argument("--stop-after", type=int, metavar="N", help="run at most N epochs in this invocation")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    p = add("eval", cmd_eval, "Evaluate a checkpoint on one split of a dataset bundle.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset bundle directory")
    p.add_argument("--split", default=TEST, choices=SPLITS)
    p.add_argument("--config", help="run config JSON; its architecture must match the checkpoint")
    p.add_argument("--out", help="report path (default: report-<split>.json next to the checkpoint)")
    p.add_argument("--current", action="store_true", help="use the last parameters instead of the best ones")

    for name, func, choices, text in (
        ("ablate", cmd_ablate, ABLATIONS, "Run an ablation recipe across seeds."),
        ("sweep", cmd_sweep, SWEEPS, "Run a parameter sweep recipe across seeds."),
    ):
        p = add(name, func, text)
        p.add_argument("recipe", choices=choices)
        p.add_argument("--out", required=True, help="results directory")
        p.add_argument("--config", help="run config JSON applied on top of the recipe's base")
        p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2,3,4)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on this)")
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    p = add("rsa", cmd_rsa, "Write the three similarity matrices of a trained model.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset bundle directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", default=TEST, choices=SPLITS)
    p.add_argument("--current", action="store_true", help="use the last parameters instead of the best ones")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    p = add("export-attention", cmd_export_attention, "Write the temporal attention profile as t,weight CSV.")
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--config", help="run config JSON; exports the freshly initialised profile")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--current", action="store_true", help="use the last parameters instead of the best ones")
    return parser


def _exit_code(exc: BaseException) -> int | None:
    if isinstance(exc, ExperimentError) and exc.__cause__ is not None:
        return _exit_code(exc.__cause__)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (CompatibilityError, CheckpointVersionError)):
        return EXIT_COMPAT
    if isinstance(exc, (TrainingDivergedError, NonFiniteError)):
        return EXIT_NUMERIC
    if isinstance(exc, (OutputExistsError, OSError, FeatureFormatError, CheckpointError)):
        return EXIT_IO
    return None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"ats {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
