"""ratebench command line: train | sweep | curve | ablation | probe | eval"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, List, Optional, Sequence

import torch

from config.loader import parse_config
from config.schema import RatebenchConfig
from config.settings import Settings
from utilities.error_handler import InvalidArgumentError, RatebenchError
from utilities.logging_config import configure_logging

logger = logging.getLogger("ratebench")

DEFAULT_OUTPUT_ROOT = "runs"


def output_root(flag: Optional[str], cfg: Optional[RatebenchConfig]) -> Path:
    """CLI flag > RATEBENCH_OUTPUT_ROOT > config output_root > runs"""
    if flag:
        return Path(flag)
    env = os.getenv("RATEBENCH_OUTPUT_ROOT")
    if env:
        return Path(env)
    if cfg is not None and cfg.output_root:
        return Path(cfg.output_root)
    return Path(DEFAULT_OUTPUT_ROOT)


def _emit(payload: Any, out: Optional[str] = None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, default=str)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _config(args: argparse.Namespace) -> RatebenchConfig:
    return parse_config(args.config, tuple(args.set or ()))


def cmd_train(args: argparse.Namespace) -> int:
    from core.trainer import train

    cfg = _config(args)
    out = Path(args.out) if args.out else (
        Path(cfg.train.output_dir) if cfg.train.output_dir else output_root(None, cfg) / "train")
    result = train(cfg.train, output_dir=out)
    _emit({
        "checkpoint": str(result.checkpoint_path),
        "metrics": str(result.metrics_path),
        "steps": result.state.step,
        "measured_kl": result.measured_kl,
        "measured_bitrate_bps": result.measured_bitrate_bps,
        "mel_distance": result.mel_distance,
    })
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    from core.rd_harness import run_sweep
    from database.results_store import ResultsStore

    cfg = _config(args)
    if cfg.sweep is None:
        raise InvalidArgumentError("config has no sweep section")
    out = Path(args.out) if args.out else (
        Path(cfg.sweep.output_dir) if cfg.sweep.output_dir else output_root(None, cfg) / "sweep")
    points = run_sweep(cfg.sweep, output_dir=out, workers=args.workers)
    failed = [f["model_id"] for f in ResultsStore(out).failures()]
    _emit({"output_dir": str(out), "points": [p.curve_row() for p in points], "failed": failed})
    return 0


def cmd_curve(args: argparse.Namespace) -> int:
    from core.rd_harness import emit_curve, load_points, median_over_seeds

    fmt = args.format or (Path(args.out).suffix.lstrip(".").lower() or "csv")
    points = load_points(args.inp)
    if args.median_seeds:
        points = median_over_seeds(points)
    written = emit_curve(points, out_path=args.out, fmt=fmt, plot_path=args.plot)
    _emit({name: str(path) for name, path in written.items()})
    return 0


def cmd_ablation(args: argparse.Namespace) -> int:
    from core.rd_harness import ablation_report, load_points

    table = ablation_report(load_points(args.inp), out_path=args.out)
    print(table.to_string(index=False))
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    from core.diffusion_probe import probe_report
    from core.rd_harness import load_points, record_predictability

    cfg = _config(args)
    vaes = list(args.vae or ())
    if args.sweep:
        vaes += [str(Path(args.sweep) / p.model_id / cfg.train.checkpoint_file) for p in load_points(args.sweep)]
    if not vaes and cfg.diffusion.vae_checkpoint:
        vaes = [cfg.diffusion.vae_checkpoint]
    if not vaes:
        raise InvalidArgumentError("probe needs --vae or --sweep")
    reports = []
    for path in vaes:
        logger.info("Probing %s", path)
        reports.append(probe_report(path, cfg.diffusion))
    reports.sort(key=lambda r: r["measured_bitrate"])
    if args.sweep:
        record_predictability(args.sweep, reports)
    _emit(reports, args.out)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from core.datasets import build_dataset
    from core.trainer import evaluate_mel_distance, load_checkpoint, measure_kl_bitrate

    state = load_checkpoint(args.ckpt)
    cfg = state.cfg
    dataset = build_dataset(cfg.dataset, cfg.model)
    _, eval_set = dataset.split(cfg.dataset.eval_fraction, cfg.dataset.seed)
    kl, bps = measure_kl_bitrate(state.model, eval_set)
    _emit({
        "checkpoint": str(args.ckpt),
        "family": cfg.bottleneck.kind,
        "step": state.step,
        "parameters": state.model.num_parameters(),
        "frame_rate_hz": cfg.model.frame_rate_hz,
        "measured_kl": kl,
        "measured_bitrate_bps": bps,
        "mel_distance": evaluate_mel_distance(state.model, eval_set, cfg.mel_scales),
        "eval_items": len(eval_set),
    }, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ratebench", description="Rate-distortion toolkit for audio VAEs")
    parser.add_argument("--log-level", default=None, help="overrides RATEBENCH_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser, required: bool = True) -> None:
        p.add_argument("--config", required=required, help="YAML or JSON config document")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted override applied after the file, e.g. train.steps=100")

    p = sub.add_parser("train", help="train one VAE")
    with_config(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train the sweep grid into RD points")
    with_config(p)
    p.add_argument("--out", help="sweep directory")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("curve", help="emit the RD curve table and plot")
    p.add_argument("--in", dest="inp", required=True, help="sweep directory")
    p.add_argument("--out", required=True, help="table path")
    p.add_argument("--plot", help="plot path (.svg/.png/.pdf)")
    p.add_argument("--format", choices=("csv", "json"), default=None)
    p.add_argument("--median-seeds", action="store_true", help="one point per configuration, median over seeds")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("ablation", help="passthrough / adversarial ablation table")
    p.add_argument("--in", dest="inp", required=True, help="sweep directory")
    p.add_argument("--out", help="report path (.csv, .json or text)")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("probe", help="latent predictability probe")
    p.add_argument("--vae", action="append", help="VAE checkpoint; repeatable")
    p.add_argument("--sweep", help="probe every point of this sweep directory and record the scores")
    with_config(p, required=False)
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its held-out split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level.upper() if args.log_level else None)
    if Settings.TORCH_THREADS > 0:
        torch.set_num_threads(Settings.TORCH_THREADS)
    try:
        return args.func(args)
    except RatebenchError as e:
        logger.error("%s failed: %s", args.command, e)
        print(json.dumps(e.to_dict(), default=str), file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception("%s failed unexpectedly", args.command)
        print(json.dumps({"error": "internal", "type": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
