"""Rate-distortion sweeps, curves and ablation tables.

Gaussian points are placed on the bitrate axis by their measured KL; VQ
points by their structural rate S·n·log2(K). Both families share one axis.
"""
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from config.schema import RateConfig, SweepConfig, TrainConfig  # noqa: E402
from config.settings import Settings  # noqa: E402
from core.parallel_processing import ParallelProcessor  # noqa: E402
from core.rate_core import kl_to_bitrate, vq_bitrate, vq_kl_nats  # noqa: E402
from core.trainer import train  # noqa: E402
from database.results_store import ResultsStore  # noqa: E402
from utilities.error_handler import InvalidArgumentError, log_error  # noqa: E402

logger = logging.getLogger(__name__)

CURVE_COLUMNS = [
    "model_id", "family", "target_kl", "lambda", "measured_kl",
    "measured_bitrate_bps", "mel_distance", "seed",
]
DEFAULT_ADV_WEIGHT = 1.0
DEFAULT_FEATURE_MATCH_WEIGHT = 2.0

PathLike = Union[str, Path]


@dataclass
class RDPoint:
    model_id: str
    family: str
    target_kl: float
    lambda_weight: float
    measured_kl: float
    measured_bitrate_bps: float
    mel_distance: float
    seed: int
    passthrough_prob: float = 0.0
    adversarial: bool = False
    frame_rate_hz: Optional[float] = None
    latent_dim: Optional[int] = None
    codebook_size: Optional[int] = None
    num_codebooks: Optional[int] = None
    predictability: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def curve_row(self) -> Dict[str, Any]:
        return {
            "model_id": self.model_id,
            "family": self.family,
            "target_kl": self.target_kl,
            "lambda": self.lambda_weight,
            "measured_kl": self.measured_kl,
            "measured_bitrate_bps": self.measured_bitrate_bps,
            "mel_distance": self.mel_distance,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RDPoint":
        data = dict(data)
        if "lambda" in data:
            data["lambda_weight"] = data.pop("lambda")
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})

    @property
    def variant(self) -> str:
        return f"passthrough {round(self.passthrough_prob * 100):d}%, discriminator {'on' if self.adversarial else 'off'}"


def _fmt_num(value: float) -> str:
    return f"{value:g}".replace("+", "")


def point_id(kind: str, seed: int, passthrough_prob: float, adversarial: bool,
             target_kl: Optional[float] = None, lambda_weight: Optional[float] = None,
             codebook_size: Optional[int] = None, num_codebooks: Optional[int] = None) -> str:
    if kind == "vq":
        head = f"vq-K{codebook_size}-n{num_codebooks}"
    else:
        head = f"gaussian-kl{_fmt_num(target_kl)}-lam{_fmt_num(lambda_weight)}"
    return f"{head}-pt{_fmt_num(passthrough_prob)}-adv{int(adversarial)}-s{seed}"


def _with_adversarial(cfg: TrainConfig, adversarial: bool) -> Dict[str, float]:
    w = cfg.weights
    if not adversarial:
        return {"adv_weight": 0.0, "feature_match_weight": 0.0}
    return {
        "adv_weight": w.adv_weight or DEFAULT_ADV_WEIGHT,
        "feature_match_weight": w.feature_match_weight or DEFAULT_FEATURE_MATCH_WEIGHT,
    }


def iter_points(sweep: SweepConfig) -> List[Tuple[str, TrainConfig]]:
    """Expand the sweep axes into (model_id, TrainConfig) pairs in a fixed order."""
    base = sweep.base
    points = []
    for kind in sweep.kinds:
        if kind == "vq":
            ladder = [(None, None, n) for n in sweep.vq_num_codebooks]
        else:
            ladder = [(t, lam, None) for t, lam in itertools.product(sweep.target_kls, sweep.lambda_weights)]

        for (target, lam, n_books), p, adv, seed in itertools.product(
                ladder, sweep.passthrough_probs, sweep.adversarial, sweep.seeds):
            if kind == "vq":
                bottleneck = replace(base.bottleneck, kind="vq", rate_loss="none", lambda_weight=0.0,
                                     num_codebooks=n_books, passthrough_prob=p)
                rate = RateConfig(target_kl_nats=vq_kl_nats(bottleneck.codebook_size, n_books))
                lam_value = 0.0
            else:
                rate_loss = base.bottleneck.rate_loss if base.bottleneck.kind == "gaussian" else "target_kl"
                bottleneck = replace(base.bottleneck, kind="gaussian", rate_loss=rate_loss,
                                     lambda_weight=lam, passthrough_prob=p)
                rate = RateConfig(target_kl_nats=target)
                lam_value = lam
            weights = replace(base.weights, rate_weight=lam_value, **_with_adversarial(base, adv))
            cfg = replace(base, bottleneck=bottleneck, weights=weights, rate=rate, seed=seed,
                          model=replace(base.model, seed=seed), output_dir=None)
            mid = point_id(kind, seed, p, adv, target, lam, bottleneck.codebook_size, n_books)
            points.append((mid, cfg))

    ids = [mid for mid, _ in points]
    if len(set(ids)) != len(ids):
        raise InvalidArgumentError("sweep axes contain duplicate values")
    return points


def run_point(model_id: str, cfg: TrainConfig, point_dir: PathLike) -> RDPoint:
    """Train one configuration and evaluate it into an RDPoint."""
    result = train(cfg, output_dir=point_dir)
    S = cfg.model.frame_rate_hz
    common = dict(
        model_id=model_id,
        family=cfg.bottleneck.kind,
        mel_distance=result.mel_distance,
        seed=cfg.seed,
        passthrough_prob=cfg.bottleneck.passthrough_prob,
        adversarial=cfg.weights.adversarial_enabled,
        frame_rate_hz=S,
        latent_dim=cfg.model.latent_dim,
    )
    if cfg.bottleneck.kind == "vq":
        K, n = cfg.bottleneck.codebook_size, cfg.bottleneck.num_codebooks
        return RDPoint(target_kl=vq_kl_nats(K, n), lambda_weight=0.0, measured_kl=vq_kl_nats(K, n),
                       measured_bitrate_bps=vq_bitrate(K, n, S), codebook_size=K, num_codebooks=n, **common)
    return RDPoint(target_kl=cfg.rate_spec.target_kl_nats, lambda_weight=cfg.bottleneck.lambda_weight,
                   measured_kl=result.measured_kl, measured_bitrate_bps=result.measured_bitrate_bps, **common)


def _run_point_task(task: Dict[str, Any]) -> Dict[str, Any]:
    """Process-pool entry point; results are plain dicts recorded by the parent."""
    return run_point(task["id"], task["config"], task["dir"]).to_dict()


def _completed(store: ResultsStore, out: Path, model_id: str, cfg: TrainConfig) -> Optional[RDPoint]:
    record = store.get_point(model_id)
    if record is None or not (out / model_id / cfg.checkpoint_file).exists():
        return None
    return RDPoint.from_dict(record)


def run_sweep(sweep: SweepConfig, output_dir: Optional[PathLike] = None,
              workers: Optional[int] = None) -> List[RDPoint]:
    """Train every sweep point, skipping ones already completed in `output_dir`.

    Failed points are logged and recorded in status.jsonl; the rest continue.
    Returns completed points in sweep order.
    """
    out = Path(output_dir or sweep.output_dir or Settings.output_root() / "sweep")
    out.mkdir(parents=True, exist_ok=True)
    store = ResultsStore(out)
    workers = workers or sweep.workers
    points = iter_points(sweep)
    logger.info("Sweep of %d points in %s (%d workers)", len(points), out, workers)

    done: Dict[str, RDPoint] = {}
    pending = []
    for mid, cfg in points:
        existing = _completed(store, out, mid, cfg)
        if existing is not None:
            logger.info("Skipping completed point %s", mid)
            done[mid] = existing
        else:
            pending.append({"id": mid, "config": cfg, "dir": str(out / mid)})

    if workers > 1 and len(pending) > 1:
        def record(mid: str, point: Dict[str, Any]) -> None:
            store.insert_point(point)
            store.record_status(mid, "done")
            done[mid] = RDPoint.from_dict(point)

        _, errors = ParallelProcessor(workers).process_batch(pending, _run_point_task, on_result=record)
        for mid, message in errors.items():
            store.record_status(mid, "failed", error=message)
    else:
        for task in pending:
            mid = task["id"]
            logger.info("Running point %s", mid)
            try:
                point = run_point(mid, task["config"], task["dir"])
            except Exception as e:
                log_error(f"Sweep point {mid} failed", e)
                store.record_status(mid, "failed", error=f"{type(e).__name__}: {e}")
                continue
            store.insert_point(point.to_dict())
            store.record_status(mid, "done")
            done[mid] = point

    ordered = [done[mid] for mid, _ in points if mid in done]
    logger.info("Sweep finished: %d/%d points completed", len(ordered), len(points))
    return ordered


def load_points(sweep_dir: PathLike) -> List[RDPoint]:
    records = ResultsStore(sweep_dir).list_points()
    if not records:
        raise InvalidArgumentError(f"no RD points found in {sweep_dir}")
    return [RDPoint.from_dict(r) for r in records]


def record_predictability(sweep_dir: PathLike, reports: Sequence[Dict[str, Any]]) -> List[RDPoint]:
    """Attach probe scores to the sweep's RDPoints, matched on model_id.

    Updated points are appended to points.jsonl; the latest record wins on read.
    Reports with no matching point are skipped.
    """
    store = ResultsStore(sweep_dir)
    updated = []
    for report in reports:
        record = store.get_point(report["model_id"])
        if record is None:
            logger.warning("No RD point %s in %s; probe score not recorded", report["model_id"], sweep_dir)
            continue
        updated.append(replace(RDPoint.from_dict(record), predictability=report["predictability_score"]))
    store.points.insert_many(p.to_dict() for p in updated)
    return updated


def pareto_front(points: Sequence[RDPoint]) -> List[RDPoint]:
    """Points not beaten by any point at lower or equal bitrate, in bitrate order."""
    front, best = [], math.inf
    for p in sorted(points, key=lambda q: (q.measured_bitrate_bps, q.mel_distance)):
        if p.mel_distance < best:
            front.append(p)
            best = p.mel_distance
    return front


def median_over_seeds(points: Sequence[RDPoint]) -> List[RDPoint]:
    """Collapse seeds: one point per configuration with median metrics; seed is -1."""
    if not points:
        return []
    df = pd.DataFrame([p.to_dict() for p in points])
    df["config_id"] = df["model_id"].str.replace(r"-s\d+$", "", regex=True)
    agg = df.groupby("config_id", sort=False).agg(
        family=("family", "first"),
        target_kl=("target_kl", "first"),
        lambda_weight=("lambda_weight", "first"),
        measured_kl=("measured_kl", "median"),
        measured_bitrate_bps=("measured_bitrate_bps", "median"),
        mel_distance=("mel_distance", "median"),
        passthrough_prob=("passthrough_prob", "first"),
        adversarial=("adversarial", "first"),
    )
    return [
        RDPoint(model_id=cid, seed=-1, **{k: (v.item() if hasattr(v, "item") else v) for k, v in row.items()})
        for cid, row in agg.iterrows()
    ]


def curve_frame(points: Sequence[RDPoint]) -> pd.DataFrame:
    return pd.DataFrame([p.curve_row() for p in points], columns=CURVE_COLUMNS)


def emit_curve(points: Sequence[RDPoint], out_path: Optional[PathLike] = None, fmt: str = "csv",
               plot_path: Optional[PathLike] = None) -> Dict[str, Path]:
    """Write the curve table (csv/json) and optionally the bitrate vs mel-distance plot."""
    if not points:
        raise InvalidArgumentError("emit_curve needs at least one point")
    if fmt not in ("csv", "json"):
        raise InvalidArgumentError(f"format must be csv or json, got {fmt!r}")

    written: Dict[str, Path] = {}
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        df = curve_frame(points)
        if fmt == "csv":
            df.to_csv(out_path, index=False)
        else:
            df.to_json(out_path, orient="records", indent=2)
        written["table"] = out_path
    if plot_path is not None:
        written.update(plot_curve(points, plot_path))
    return written


def plot_curve(points: Sequence[RDPoint], plot_path: PathLike) -> Dict[str, Path]:
    """Static plot, one series per family, Pareto front dashed; sidecar JSON lists the series."""
    plot_path = Path(plot_path)
    plot_path.parent.mkdir(parents=True, exist_ok=True)

    families = list(dict.fromkeys(p.family for p in points))
    front = pareto_front(points)
    fig, ax = plt.subplots(figsize=(6, 4))
    series = []
    for family in families:
        members = sorted((p for p in points if p.family == family), key=lambda p: p.measured_bitrate_bps)
        x = [p.measured_bitrate_bps for p in members]
        y = [p.mel_distance for p in members]
        ax.plot(x, y, marker="o", linewidth=1.2, label=family)
        series.append({"family": family, "model_ids": [p.model_id for p in members],
                       "measured_bitrate_bps": x, "mel_distance": y})
    ax.plot([p.measured_bitrate_bps for p in front], [p.mel_distance for p in front],
            linestyle="--", color="black", linewidth=0.8, label="pareto front")

    positive = [p.measured_bitrate_bps for p in points if p.measured_bitrate_bps > 0]
    if positive:
        ax.set_xscale("log")
    ax.set_xlabel("Bitrate (bps)")
    ax.set_ylabel("Mel distance")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(plot_path)
    plt.close(fig)

    sidecar = plot_path.with_name(plot_path.name + ".json")
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump({
            "x": "measured_bitrate_bps",
            "y": "mel_distance",
            "x_scale": "log" if positive else "linear",
            "series": series,
            "pareto_front": [p.model_id for p in front],
        }, f, indent=2)
    return {"plot": plot_path, "plot_metadata": sidecar}


def read_curve_csv(path: PathLike) -> List[RDPoint]:
    path = Path(path)
    if not path.is_file():
        raise InvalidArgumentError(f"curve file {path} does not exist")
    df = pd.read_csv(path, dtype={"model_id": str, "family": str})
    if list(df.columns) != CURVE_COLUMNS:
        raise InvalidArgumentError(f"{path} columns {list(df.columns)} != {CURVE_COLUMNS}")
    return [
        RDPoint(
            model_id=row["model_id"],
            family=row["family"],
            target_kl=float(row["target_kl"]),
            lambda_weight=float(row["lambda"]),
            measured_kl=float(row["measured_kl"]),
            measured_bitrate_bps=float(row["measured_bitrate_bps"]),
            mel_distance=float(row["mel_distance"]),
            seed=int(row["seed"]),
        )
        for row in df.to_dict(orient="records")
    ]


def ablation_report(points: Sequence[RDPoint], out_path: Optional[PathLike] = None) -> pd.DataFrame:
    """One row per (family, target, rate lambda, variant) with median metrics over seeds.

    Output format follows the suffix of `out_path`: .csv, .json or plain text.
    """
    if not points:
        raise InvalidArgumentError("ablation_report needs at least one point")
    specs = {(p.frame_rate_hz, p.latent_dim) for p in points}
    if len(specs) > 1:
        raise InvalidArgumentError(f"points do not share a rate spec (frame rate, latent dim): {sorted(specs, key=str)}")

    df = pd.DataFrame([{**p.to_dict(), "rate_lambda": p.lambda_weight, "variant": p.variant} for p in points])
    keys = ["family", "target_kl", "rate_lambda", "variant"]
    table = (
        df.groupby(keys, sort=False)
        .agg(mel_distance=("mel_distance", "median"),
             measured_kl=("measured_kl", "median"),
             n_seeds=("seed", "nunique"))
        .reset_index()
    )
    frame_rate = next(iter(specs))[0]
    if frame_rate is not None:
        table["bitrate_kbps"] = [kl_to_bitrate(kl, frame_rate) / 1000.0 for kl in table["measured_kl"]]
    else:
        table["bitrate_kbps"] = (
            df.groupby(keys, sort=False)["measured_bitrate_bps"].median().values / 1000.0
        )

    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        suffix = out_path.suffix.lower()
        if suffix == ".csv":
            table.to_csv(out_path, index=False)
        elif suffix == ".json":
            table.to_json(out_path, orient="records", indent=2)
        else:
            out_path.write_text(table.to_string(index=False) + "\n", encoding="utf-8")
    return table
