"""Command-line interface with one subcommand per pipeline step.

Every command writes its outputs with exclusive creation (``--force``
overwrites). Failures exit with status 1 and print one JSON error record on
stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import io
from .config import ConfigError, RunConfig
from .experiments import METHODS, align_by_frame, evaluate, run_method
from .particle_filter import DegenerateParticlesError, thread_count
from .simulator import export_scene, simulate
from .vsmc import TrainingDiverged, build_training_data, train

BENCH_HEADER = ("method", "seed", "pdq", "map")
EVAL_HEADER = ("method", "frame_or_video", "pdq", "map")
CURVE_HEADER = ("stage", "epoch", "loss", "grad_norm")


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "particles", None) is not None:
        overrides.append(f"filter.particles={args.particles}")
    if getattr(args, "method", None) is not None:
        overrides.append(f"run.method={json.dumps(args.method)}")
    return RunConfig.load(args.config, overrides)


def _params(cfg: RunConfig, path: Optional[str]):
    return io.read_params(path) if path else cfg.model_params()


def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out_dir: Path, force: bool = False) -> dict:
    scene = simulate(cfg.sim_config())
    out_dir.mkdir(parents=True, exist_ok=True)
    frames_path, truth_path = out_dir / "frames.jsonl", out_dir / "truth.jsonl"
    export_scene(scene, frames_path, truth_path, force=force)
    return {"command": "simulate", "frames": str(frames_path), "truth": str(truth_path),
            "num_frames": len(scene.frames)}


def cmd_track(cfg: RunConfig, frames_path: Path, out: Path, params_path: Optional[str] = None,
              force: bool = False) -> dict:
    params = _params(cfg, params_path)
    frames = io.read_frames(frames_path)
    records, log_marginal = run_method(
        cfg["run.method"], frames, params, cfg["filter.particles"], cfg["run.seed"],
        cfg["filter.min_score"], workers=thread_count(),
    )
    io.write_objects(out, [(f.frame_index, recs) for f, recs in zip(frames, records)], kind="tracks",
                     force=force)
    return {"command": "track", "method": cfg["run.method"], "tracks": str(out),
            "num_frames": len(frames), "log_marginal": log_marginal}


def cmd_train(cfg: RunConfig, dataset: Path, out: Path, curve: Optional[Path] = None,
              params_path: Optional[str] = None, force: bool = False) -> dict:
    params = _params(cfg, params_path)
    frames = io.read_frames(dataset / "frames.jsonl")
    truth = io.read_objects(dataset / "truth.jsonl", kind="truth")
    if [f.frame_index for f in frames] != [t for t, _ in truth]:
        raise ValueError(f"{dataset}: frames.jsonl and truth.jsonl cover different frames")
    labels = [[r.to_state() for r in recs] for _, recs in truth]
    rng = np.random.default_rng([cfg["run.seed"], 7])
    data = build_training_data(frames, labels, cfg["train.label_fraction"], cfg["train.horizon"], rng)
    result = train(data, params, cfg.train_config())
    curve = curve or out.with_name(out.stem + ".curve.csv")
    # check both destinations before writing either
    for path in (out, curve):
        if path.exists() and not force:
            raise FileExistsError(f"{path}: refusing to overwrite existing file (use --force)")
    io.write_params(out, result.params, force=force)
    io.write_csv(curve, CURVE_HEADER, result.curve, force=force)
    return {"command": "train", "params": str(out), "curve": str(curve), "epochs": len(result.curve),
            "labeled_frames": data.num_labeled}


def cmd_eval(cfg: RunConfig, tracks_path: Path, truth_path: Path, out: Path, force: bool = False) -> dict:
    pred = io.read_objects(tracks_path)
    truth = io.read_objects(truth_path, kind="truth")
    frames, preds, gts = align_by_frame(pred, truth)
    num_classes = cfg["model.num_classes"]
    ev = evaluate(preds, gts, num_classes, cfg["metrics.default_var"], cfg["metrics.iou_threshold"])
    method = cfg["run.method"]
    rows = [(method, str(t), p, m) for t, p, m in zip(frames, ev.frame_pdq, ev.frame_map)]
    rows.append((method, "video", ev.pdq, ev.map))
    io.write_csv(out, EVAL_HEADER, rows, force=force)
    return {"command": "eval", "metrics": str(out), "pdq": ev.pdq, "map": ev.map}


def bench_rows(cfg: RunConfig) -> List[tuple]:
    """One (method, seed, pdq, map) row per method and seed, ordered by method then seed."""
    params = cfg.model_params()
    base = cfg["run.seed"]
    scenes = [simulate(cfg.sim_config(seed=base + k)) for k in range(cfg["bench.seeds"])]
    workers = thread_count()
    rows = []
    for method in cfg["bench.methods"]:
        for k, scene in enumerate(scenes):
            seed = base + k
            records, _ = run_method(method, scene.frames, params, cfg["filter.particles"], seed,
                                    cfg["filter.min_score"], workers=workers)
            ev = evaluate(records, scene.truth, params.num_classes, cfg["metrics.default_var"],
                          cfg["metrics.iou_threshold"])
            rows.append((method, seed, ev.pdq, ev.map))
    return rows


def cmd_bench(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    if out.exists() and not force:
        raise FileExistsError(f"{out}: refusing to overwrite existing file (use --force)")
    rows = bench_rows(cfg)
    io.write_csv(out, BENCH_HEADER, rows, force=force)
    return {"command": "bench", "table": str(out), "rows": len(rows)}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, method: bool = True) -> None:
    p.add_argument("--config", metavar="PATH", help="config file of dotted 'key = JSON' lines")
    p.add_argument("--set", action="append", metavar="K=V", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, metavar="U64", help="master seed (run.seed)")
    p.add_argument("--particles", type=int, metavar="N", help="particle count (filter.particles)")
    if method:
        p.add_argument("--method", choices=METHODS, help="tracking method (run.method)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayes-d2t", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scene")
    _common(p, method=False)
    p.add_argument("--out", required=True, metavar="PATH", help="output directory")

    p = sub.add_parser("track", help="run a tracker over a frames file")
    _common(p)
    p.add_argument("frames", help="frames JSONL file")
    p.add_argument("--params", metavar="PATH", help="trained params JSON (overrides model.* keys)")
    p.add_argument("--out", required=True, metavar="PATH", help="tracks JSONL output")

    p = sub.add_parser("train", help="two-stage semi-supervised training of the motion model")
    _common(p, method=False)
    p.add_argument("dataset", help="directory holding frames.jsonl and truth.jsonl")
    p.add_argument("--params", metavar="PATH", help="initial params JSON")
    p.add_argument("--curve", metavar="PATH", help="loss-curve CSV (default: next to --out)")
    p.add_argument("--out", required=True, metavar="PATH", help="trained params JSON output")

    p = sub.add_parser("eval", help="score a tracks file against ground truth")
    _common(p)
    p.add_argument("tracks", help="tracks JSONL file")
    p.add_argument("truth", help="truth JSONL file")
    p.add_argument("--out", required=True, metavar="PATH", help="metrics CSV output")

    p = sub.add_parser("bench", help="every method on every seed of a simulated benchmark")
    _common(p, method=False)
    p.add_argument("--out", required=True, metavar="PATH", help="table CSV output")
    return parser


def _error_record(exc: BaseException) -> dict:
    if isinstance(exc, (ConfigError, io.FormatError)):
        return exc.to_record()
    if isinstance(exc, DegenerateParticlesError):
        return {"error": "degenerate_particles", "frame": exc.frame_index, "message": str(exc)}
    if isinstance(exc, TrainingDiverged):
        return {"error": "training_diverged", "stage": exc.stage, "epoch": exc.epoch, "message": str(exc)}
    if isinstance(exc, FileExistsError):
        return {"error": "output_exists", "message": str(exc)}
    if isinstance(exc, OSError):
        return {"error": "io_error", "message": str(exc)}
    return {"error": "invalid_input", "message": str(exc)}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        out = Path(args.out)
        if args.command == "simulate":
            report = cmd_simulate(cfg, out, args.force)
        elif args.command == "track":
            report = cmd_track(cfg, Path(args.frames), out, args.params, args.force)
        elif args.command == "train":
            report = cmd_train(cfg, Path(args.dataset), out, Path(args.curve) if args.curve else None,
                               args.params, args.force)
        elif args.command == "eval":
            report = cmd_eval(cfg, Path(args.tracks), Path(args.truth), out, args.force)
        else:
            report = cmd_bench(cfg, out, args.force)
    except (ConfigError, io.FormatError, DegenerateParticlesError, TrainingDiverged, OSError,
            ValueError) as exc:
        sys.stderr.write(json.dumps(_error_record(exc), sort_keys=True) + "\n")
        return 1
    _emit(report)
    return 0


if __name__ == "__main__":
    sys.exit(main())
