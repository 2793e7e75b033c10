#!/usr/bin/env python3
"""
LUVT pipeline runner
Simulates series, trains the detector with the staged schedule, evaluates PR curves,
predicts single frames and benchmarks latency.

Usage:
    python run_pipeline.py simulate --config configs/default.cfg --out runs/demo
    python run_pipeline.py train    --config configs/default.cfg --out runs/demo
    python run_pipeline.py evaluate --config configs/default.cfg --out runs/demo [--checkpoint PATH ...]
    python run_pipeline.py predict  --config configs/default.cfg --out runs/demo --image frame.pgm
    python run_pipeline.py bench    --config configs/default.cfg --out runs/demo

Every run writes under --out: data/seriesNNN/, ckpt/, reports/.
Failures print one line `error kind=<Class> message="..."` on stderr; exit code 2 for
configuration/validation problems, 1 for runtime failures.
"""
import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pydantic

from crud.checkpoints import load_checkpoint, save_checkpoint
from crud.reports import write_dataset_summary, write_latency, write_pr_curves, write_train_report
from crud.series import load_all_series, load_image, save_series
from services.dataset import auto_label, build_samples, split_by_series, summarize_series
from services.detector_service import DetectorService
from services.evaluation import (
    classification_accuracy, default_r_grid, latency_bench, pr_at, pr_curve, predict_samples,
)
from services.model import build_model, parameter_count
from services.records import Sample, Series
from services.training import run_schedule
from services.wavesim import PlateSpec, default_corpus, simulate_series
from utils.config import RunConfig, dump_config, load_config
from utils.logging_config import setup_logging
from utils.validation import LuvtError, ValidationError

logger = logging.getLogger("run_pipeline")

COMMANDS = ("simulate", "train", "evaluate", "predict", "bench")


class Layout:
    """Fixed artifact layout under --out"""

    def __init__(self, out: Path):
        self.root = Path(out)
        self.data = self.root / "data"
        self.ckpt = self.root / "ckpt"
        self.reports = self.root / "reports"

    @property
    def best(self) -> Path:
        return self.ckpt / "best.ckpt"

    def epoch_checkpoint(self, epoch: int) -> Path:
        return self.ckpt / f"epoch_{epoch:03d}.ckpt"

    def record_config(self, command: str, config: RunConfig) -> None:
        self.reports.mkdir(parents=True, exist_ok=True)
        (self.reports / f"{command}.cfg").write_text(dump_config(config), encoding="utf-8")


def _simulate_one(job: Tuple[int, str, PlateSpec, int, int, float]) -> Series:
    series_id, position, spec, n_snapshots, stride, visibility = job
    series = simulate_series(spec, n_snapshots, stride, series_id=series_id, position=position)
    series.annotations = auto_label(series, spec, visibility)
    return series


def simulate(config: RunConfig, layout: Layout) -> int:
    sim = config.sim
    corpus = default_corpus(sim.plate_spec(), config.seed, sim.defect_length_mm,
                            sim.defect_width_mm, sim.orientation_deg)
    jobs = [(sid, pos, spec, sim.n_snapshots, sim.stride, sim.visibility) for sid, pos, spec in corpus]
    logger.info(f"🌊 Simulating {len(jobs)} series with {config.workers} worker(s)")

    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            series_list = list(pool.map(_simulate_one, jobs))
    else:
        series_list = [_simulate_one(job) for job in jobs]

    for series in series_list:
        save_series(series, layout.data)
    write_dataset_summary(summarize_series(series_list), layout.reports / "dataset_summary.csv")
    layout.record_config("simulate", config)
    return 0


def _load_splits(config: RunConfig, layout: Layout) -> Tuple[List[Sample], List[Sample], List[Sample]]:
    split = config.data.split()
    series = load_all_series(layout.data)
    train, val, test = split_by_series(series, split)
    size = config.data.input_size
    return build_samples(train, size), build_samples(val, size), build_samples(test, size)


def train(config: RunConfig, layout: Layout) -> int:
    if not layout.data.is_dir():
        raise ValidationError(f"data directory {layout.data} not found; run simulate first")
    train_samples, val_samples, _ = _load_splits(config, layout)
    logger.info(f"📊 {len(train_samples)} training / {len(val_samples)} validation samples")

    model = build_model(config.model.backbone(config.data.input_size), seed=config.seed)
    schedule = config.train.schedule()

    def on_epoch(record, current):
        save_checkpoint(layout.epoch_checkpoint(record.epoch), current)

    report = run_schedule(train_samples, val_samples, schedule, model,
                          config.train_settings(), on_epoch=on_epoch)
    save_checkpoint(layout.best, model, report.best_state)
    write_train_report(report, layout.reports / "train_report.csv")
    layout.record_config("train", config)
    logger.info(f"🏁 Best checkpoint (epoch {report.selected_epoch}) saved to {layout.best}")
    return 0


def _eval_samples(config: RunConfig, layout: Layout) -> List[Sample]:
    train_samples, val_samples, test_samples = _load_splits(config, layout)
    return {"train": train_samples, "val": val_samples, "test": test_samples}[config.eval.split]


def evaluate(config: RunConfig, layout: Layout, checkpoints: Sequence[str]) -> int:
    paths = [Path(p) for p in checkpoints] or [layout.best]
    for path in paths:
        if not path.exists():
            raise ValidationError(f"checkpoint {path} not found")
    samples = _eval_samples(config, layout)
    truths = [s.annotation for s in samples]
    r_grid = list(config.eval.r_grid) if config.eval.r_grid else default_r_grid(config.data.input_size)

    curves = {}
    for path in paths:
        model = load_checkpoint(path)
        preds = predict_samples(samples, model, config.eval.batch_size)
        curves[str(path)] = pr_curve(preds, truths, r_grid)
        at_r = pr_at(preds, truths, config.select_r())
        logger.info(f"🧪 {path}: accuracy={classification_accuracy(preds, truths):.4f} "
                    f"precision@{at_r.r:g}={at_r.precision:.4f} recall@{at_r.r:g}={at_r.recall:.4f} "
                    f"F={at_r.f_measure:.4f} params={parameter_count(model)}")

    write_pr_curves(curves, layout.reports / "pr_curve.csv")
    layout.record_config("evaluate", config)
    return 0


def predict(config: RunConfig, layout: Layout, image: str, checkpoints: Sequence[str]) -> int:
    image_path = Path(image)
    if not image_path.is_file():
        raise ValidationError(f"image {image_path} not found")
    checkpoint = Path(checkpoints[0]) if checkpoints else layout.best
    if not checkpoint.exists():
        raise ValidationError(f"checkpoint {checkpoint} not found")

    service = DetectorService(str(checkpoint))
    pred = service.predict_frame(load_image(image_path))
    x, y = pred.center_px
    print(f"class={pred.predicted_class} probability={pred.defect_probability:.6f} "
          f"center_x={x:.2f} center_y={y:.2f}")
    return 0


def _bench_images(config: RunConfig, layout: Layout) -> List[np.ndarray]:
    size = config.data.input_size
    if layout.data.is_dir():
        samples = _eval_samples(config, layout)
        return [s.image for s in samples[:config.bench.images]]
    rng = np.random.default_rng(config.seed)
    return [rng.random((size, size)).astype(np.float32) for _ in range(config.bench.images)]


def bench(config: RunConfig, layout: Layout, checkpoints: Sequence[str]) -> int:
    images = _bench_images(config, layout)
    bench_cfg = config.bench
    models = []
    if checkpoints or layout.best.exists():
        for path in checkpoints or [layout.best]:
            models.append((str(path), load_checkpoint(path)))
    else:
        backbone = config.model.backbone(config.data.input_size)
        models.append(("configured", build_model(backbone, seed=config.seed)))

    if bench_cfg.compare_half_width:
        base = models[0][1].config
        half = base.model_copy(update={"widths": tuple(max(1, w // 2) for w in base.widths)})
        models.append(("half_width", build_model(half, seed=config.seed)))

    reports = [
        latency_bench(model, images, bench_cfg.warmup, bench_cfg.reps, bench_cfg.pin_cpu, label=label)
        for label, model in models
    ]
    write_latency(reports, layout.reports / "latency.csv")
    layout.record_config("bench", config)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="run_pipeline", description="LUVT defect detection pipeline")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--seed", type=int, help="RNG seed (overrides the config key)")
    parser.add_argument("--out", default="runs/default", help="artifact root")
    parser.add_argument("--checkpoint", action="append", default=[],
                        help="checkpoint for evaluate/predict/bench (repeatable for evaluate)")
    parser.add_argument("--image", help="frame for predict")
    parser.add_argument("--log-format", choices=("text", "json"), default="text")
    parser.add_argument("--log-level", default="INFO")
    return parser


def _fail(error: BaseException, code: int) -> int:
    message = " ".join(str(error).split()).replace('"', "'")
    print(f'error kind={type(error).__name__} message="{message}"', file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level, args.log_format)
    try:
        config = load_config(args.config, args.overrides, args.seed)
        layout = Layout(Path(args.out))
        logger.info(f"🚀 {args.command} seed={config.seed} out={layout.root}")
        if args.command == "simulate":
            return simulate(config, layout)
        if args.command == "train":
            return train(config, layout)
        if args.command == "evaluate":
            return evaluate(config, layout, args.checkpoint)
        if args.command == "predict":
            if not args.image:
                raise ValidationError("predict needs --image")
            return predict(config, layout, args.image, args.checkpoint)
        return bench(config, layout, args.checkpoint)
    except (ValidationError, pydantic.ValidationError) as e:
        return _fail(e, 2)
    except (LuvtError, OSError) as e:
        logger.error(f"❌ {args.command} failed: {e}", exc_info=logging.getLogger().isEnabledFor(logging.DEBUG))
        return _fail(e, 1)


if __name__ == "__main__":
    sys.exit(main())
