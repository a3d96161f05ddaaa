"""Command-line entry point: simulate | train | eval | verify-theory | plot.

Global flags: --config PATH (JSON), --seed U64, --out DIR, --threads N.
The env var AGMA_LOG in {error, warn, info, debug} controls verbosity.
Exit codes: 0 ok, 2 config or input problem, 3 numeric failure,
4 checkpoint mismatch, 5 theory violation.

Every command writes a manifest.json next to its artifacts with the fully
resolved configuration and seed, so re-running the same command on the same
inputs reproduces the outputs byte for byte (the manifest's wall-clock
duration field aside).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .artifacts import RunManifest, atomic_write_text, read_predictions_csv, write_predictions_csv
from .errors import (
    CheckpointError,
    ConfigError,
    DomainError,
    EmptyDatasetError,
    NumericalError,
    ParseError,
    ShapeError,
)
from .nets import load_checkpoint, save_checkpoint
from .plotting import curve_svg, scene_overlay_svg
from .theory import info_gap_sweep, info_gap_to_csv, random_model, sweep_to_csv, verify_suite
from .trajectory import SynthConfig, generate_synthetic, ingest_ethucy, min_of_n, write_ethucy
from .training import METRICS_HEADER, TrainConfig, evaluate, fit, infer, write_metrics_csv

log = logging.getLogger("agma")

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4
EXIT_THEORY = 5

# structural fields that must agree between a checkpoint and a config file
_MODEL_KEYS = ("latent_dim", "t_obs", "t_pred", "decoder_hidden", "k_global",
               "attention_normalizer", "refine")


def _setup_logging():
    raw = os.environ.get("AGMA_LOG", "warn").lower()
    level = _LOG_LEVELS.get(raw)
    logging.basicConfig(level=level or logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if level is None and raw not in _LOG_LEVELS:
        log.warning("unknown AGMA_LOG value %r, using warn", raw)


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    known = {"synthetic", "train", "eval", "theory"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}; expected {sorted(known)}")
    return cfg


def _section(cfg, name, allowed):
    section = cfg.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    return dict(section)


def _build(cls, section, seed_override):
    if seed_override is not None:
        section["seed"] = seed_override
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {cls.__name__}: {exc}") from None


def _out_dir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


# -- subcommands --------------------------------------------------------------------


def cmd_simulate(args):
    cfg = _load_config(args.config)
    synth = _build(SynthConfig, _section(cfg, "synthetic", SynthConfig.__dataclass_fields__), args.seed)
    out = _out_dir(args)
    manifest = RunManifest("simulate", {"synthetic": asdict(synth)}, synth.seed, __version__)
    scenes = generate_synthetic(synth, seed=synth.seed)
    path = os.path.join(out, "scenes.txt")
    write_ethucy(scenes, path)
    log.info("wrote %d scenes to %s", len(scenes), path)
    manifest.outputs.append(path)
    manifest.write(os.path.join(out, "manifest.json"))
    print(f"simulate: {len(scenes)} scenes -> {path}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args.config)
    train_cfg = _build(TrainConfig, _section(cfg, "train", TrainConfig.__dataclass_fields__), args.seed)
    variant = "full"
    for flag, name in ((args.no_lb, "no_lb"), (args.no_lg, "no_lg"), (args.no_distill, "no_distill")):
        if flag:
            variant = name
    out = _out_dir(args)
    manifest = RunManifest("train", {"train": asdict(train_cfg), "variant": variant},
                           train_cfg.seed, __version__, inputs={"data": args.data})
    scenes = ingest_ethucy(args.data, t_obs=train_cfg.t_obs, t_pred=train_cfg.t_pred)
    log.info("training on %d scenes (%s)", len(scenes), variant)
    try:
        result = fit(train_cfg, scenes, variant=variant)
    except NumericalError as exc:
        dump = os.path.join(out, "diagnostics.json")
        atomic_write_text(dump, json.dumps({"error": str(exc), "diagnostics": repr(exc.diagnostics)}, indent=2) + "\n")
        log.error("training aborted: %s (diagnostics in %s)", exc, dump)
        raise
    ckpt = os.path.join(out, "checkpoint.npz")
    metrics = os.path.join(out, "metrics.csv")
    save_checkpoint(result.model, ckpt)
    write_metrics_csv(result.epochs, metrics)
    manifest.outputs += [ckpt, metrics]
    manifest.write(os.path.join(out, "manifest.json"))
    last = result.epochs[-1]
    print(f"train[{variant}]: {train_cfg.epochs} epochs, final L_total={last.l_total:.6f}, "
          f"val mADE_{train_cfg.n_samples}={last.val_made:.6f} -> {ckpt}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args.config)
    eval_cfg = _section(cfg, "eval", ("n_samples", "temperature", "hard"))
    n = args.n_samples if args.n_samples is not None else int(eval_cfg.get("n_samples", 20))
    if n < 1:
        raise ConfigError(f"sample count must be positive, got {n}")
    temperature = float(eval_cfg.get("temperature", 1.0))
    hard = bool(eval_cfg.get("hard", True))
    model = load_checkpoint(args.checkpoint)
    train_section = _section(cfg, "train", TrainConfig.__dataclass_fields__)
    model_cfg = asdict(model.config)
    for key in _MODEL_KEYS:
        if key in train_section and train_section[key] != model_cfg[key]:
            raise CheckpointError(
                f"checkpoint has {key}={model_cfg[key]!r} but config asks for {train_section[key]!r}"
            )
    seed = args.seed if args.seed is not None else 0
    out = _out_dir(args)
    manifest = RunManifest(
        "eval",
        {"eval": {"n_samples": n, "temperature": temperature, "hard": hard},
         "checkpoint_config": model_cfg},
        seed, __version__, inputs={"checkpoint": args.checkpoint, "data": args.data},
    )
    scenes = ingest_ethucy(args.data, t_obs=model.config.t_obs, t_pred=model.config.t_pred)
    rng = np.random.default_rng([seed, 404])
    predictions = infer(model, [s.observed_stack() for s in scenes], n, rng, temperature, hard)
    ades, fdes = [], []
    for scene, sets in zip(scenes, predictions):
        for agent, pset in zip(scene.agents, sets):
            a, f, _ = min_of_n(pset, agent.future)
            ades.append(a)
            fdes.append(f)
    made, mfde = float(np.mean(ades)), float(np.mean(fdes))
    pred_path = os.path.join(out, "predictions.csv")
    write_predictions_csv(scenes, predictions, pred_path)
    summary_path = os.path.join(out, "eval_summary.json")
    atomic_write_text(summary_path, json.dumps(
        {"n_samples": n, "n_scenes": len(scenes), "n_agents": len(ades),
         "mADE": made, "mFDE": mfde}, indent=2, sort_keys=True) + "\n")
    manifest.outputs += [pred_path, summary_path]
    manifest.write(os.path.join(out, "manifest.json"))
    print(f"eval: mADE_{n}={made:.6f} mFDE_{n}={mfde:.6f} over {len(ades)} agents -> {pred_path}")
    return EXIT_OK


def cmd_verify_theory(args):
    cfg = _load_config(args.config)
    theory_cfg = _section(cfg, "theory", ("sweep_size", "max_c", "max_v"))
    sweep_size = args.sweep_size if args.sweep_size is not None else int(theory_cfg.get("sweep_size", 100_000))
    if sweep_size < 1:
        raise ConfigError(f"sweep size must be at least 1, got {sweep_size}")
    max_c = int(theory_cfg.get("max_c", 5))
    max_v = int(theory_cfg.get("max_v", 8))
    seed = args.seed if args.seed is not None else 0
    out = _out_dir(args)
    manifest = RunManifest("verify-theory",
                           {"theory": {"sweep_size": sweep_size, "max_c": max_c, "max_v": max_v}},
                           seed, __version__)
    rng = np.random.default_rng([seed, 505])
    rows, violations = verify_suite(sweep_size, rng, max_c=max_c, max_v=max_v)
    sweep_path = os.path.join(out, "theory_sweep.csv")
    sweep_to_csv(rows, sweep_path)
    demo = random_model(np.random.default_rng([seed, 506]), max_c=4, max_v=6)
    gap_rows = info_gap_sweep(demo.true_prior, demo.true_sampler)
    gap_path = os.path.join(out, "info_gap.csv")
    info_gap_to_csv(gap_rows, gap_path)
    manifest.outputs += [sweep_path, gap_path]
    manifest.write(os.path.join(out, "manifest.json"))
    total = sum(violations.values())
    print(f"verify-theory: {sweep_size} models, violations "
          f"pinsker={violations['pinsker']} theorem={violations['theorem']} "
          f"corollary={violations['corollary']}")
    return EXIT_THEORY if total else EXIT_OK


def cmd_plot(args):
    if not args.predictions and not args.metrics:
        raise ConfigError("plot needs --predictions (with --data) and/or --metrics")
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else 0
    manifest = RunManifest(
        "plot", {"max_scenes": args.max_scenes, "ks": [1, 5, 10, 20]}, seed, __version__,
        inputs={k: v for k, v in (("predictions", args.predictions),
                                  ("data", args.data), ("metrics", args.metrics)) if v},
    )

    if args.predictions:
        if not args.data:
            raise ConfigError("--predictions requires --data for ground truth")
        preds = read_predictions_csv(args.predictions)
        n = next(iter(preds.values())).shape[0]
        t_pred = next(iter(preds.values())).shape[1]
        scenes = ingest_ethucy(args.data, t_obs=args.t_obs, t_pred=t_pred)
        from .trajectory import PredictionSet  # local import avoids a cycle-looking header

        matched = []
        for scene in scenes:
            sets = []
            for agent in scene.agents:
                key = (str(scene.scene_id), str(agent.agent_id))
                if key not in preds:
                    raise ConfigError(f"predictions are missing scene {key[0]} agent {key[1]}")
                sets.append(PredictionSet(preds[key]))
            matched.append((scene, sets))

        for scene, sets in matched[: args.max_scenes]:
            base = os.path.join(out, f"scene_{scene.scene_id}")
            scene_overlay_svg(scene, sets, base + ".svg", base + ".csv")
            manifest.outputs += [base + ".svg", base + ".csv"]

        ks = [k for k in (1, 5, 10, 20) if k <= n]
        made_k, mfde_k = [], []
        for k in ks:
            ades, fdes = [], []
            for scene, sets in matched:
                for agent, pset in zip(scene.agents, sets):
                    a, f, _ = min_of_n(pset.samples[:k], agent.future)
                    ades.append(a)
                    fdes.append(f)
            made_k.append(float(np.mean(ades)))
            mfde_k.append(float(np.mean(fdes)))
        base = os.path.join(out, "ksweep")
        curve_svg(ks, {"mADE_K": made_k, "mFDE_K": mfde_k}, base + ".svg", base + ".csv",
                  title="error vs number of samples", x_label="K")
        manifest.outputs += [base + ".svg", base + ".csv"]

    if args.metrics:
        epochs, columns = _read_metrics(args.metrics)
        base = os.path.join(out, "metrics_curves")
        curve_svg(epochs, columns, base + ".svg", base + ".csv",
                  title="training curves", x_label="epoch")
        manifest.outputs += [base + ".svg", base + ".csv"]

    manifest.write(os.path.join(out, "manifest.json"))
    print(f"plot: wrote {len(manifest.outputs)} artifacts to {out}")
    return EXIT_OK


def _read_metrics(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != METRICS_HEADER:
        raise ParseError(f"expected metrics header {METRICS_HEADER!r}", line_number=1)
    names = METRICS_HEADER.split(",")[1:]
    epochs, columns = [], {name: [] for name in names}
    for ln, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(names) + 1:
            raise ParseError(f"expected {len(names) + 1} cells", line_number=ln)
        epochs.append(int(cells[0]))
        for name, cell in zip(names, cells[1:]):
            columns[name].append(float(cell))
    if not epochs:
        raise ParseError("metrics file has no rows", line_number=1)
    return epochs, columns


# -- argument parsing ---------------------------------------------------------------


def _add_common(parser):
    parser.add_argument("--config", help="JSON config file with sections synthetic/train/eval/theory")
    parser.add_argument("--seed", type=int, help="seed overriding the config file")
    parser.add_argument("--out", help="output directory (default: current)")
    parser.add_argument("--threads", type=int, default=1,
                        help="compute-thread upper bound; kernels here are single-threaded")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="agma",
        description="Prior-guided multimodal trajectory forecasting.",
        epilog=(
            "CSV columns are fixed: predictions use scene_id,agent_id,sample_idx,t,x,y; "
            f"training metrics use {METRICS_HEADER}; theory sweeps use "
            "model_id,C,V,eps_prior,eps_sample,L_dist,bound,slack,holds. "
            "AGMA_LOG in {error,warn,info,debug} controls logging. "
            "Exit codes: 0 ok, 2 config/input, 3 numeric failure, 4 checkpoint mismatch, 5 theory violation."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic branching scenes")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a forecaster on a trajectory file")
    _add_common(p)
    p.add_argument("data", help="trajectory file: lines of frame_id ped_id x y")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--no-lb", action="store_true", help="ablation: drop the batch-prior loss")
    group.add_argument("--no-lg", action="store_true", help="ablation: drop the global-prior loss")
    group.add_argument("--no-distill", action="store_true", help="ablation: drop the transport loss")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="sample predictions and report best-of-N errors")
    _add_common(p)
    p.add_argument("checkpoint", help="checkpoint written by train")
    p.add_argument("data", help="trajectory file to evaluate on")
    p.add_argument("-n", "--n-samples", type=int, help="samples per agent (default 20)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-theory", help="certify the error bounds on random discrete models")
    _add_common(p)
    p.add_argument("--sweep-size", type=int, help="number of random models (default 100000)")
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("plot", help="emit SVG overlays and curves with sidecar CSVs")
    _add_common(p)
    p.add_argument("--predictions", help="predictions CSV from eval")
    p.add_argument("--data", help="trajectory file the predictions came from")
    p.add_argument("--metrics", help="metrics CSV from train")
    p.add_argument("--t-obs", type=int, default=8, help="observed steps when re-reading data")
    p.add_argument("--max-scenes", type=int, default=4, help="scene overlays to draw")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ParseError, EmptyDatasetError, ShapeError, DomainError,
            FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
