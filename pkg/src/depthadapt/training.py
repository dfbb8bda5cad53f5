"""Training, evaluation, and experiment orchestration.

Stage 1 trains only the adapter factors against frozen base weights (the
report records a before/after hash of the base weights as proof). Stage 2
resumes from a stage-1 checkpoint, merges the adapters, and runs the
projected full-parameter composition. Runs are deterministic for a fixed
seed on one platform: every random stream derives from the run seed.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import adapters as adapters_mod
from . import autodiff as ad
from . import stage2 as stage2_mod
from .checkpoint import LoadedCheckpoint, load_checkpoint, save_checkpoint
from .config import (RunConfig, SEED_ADAPTERS, SEED_STAGE1_BATCHES, SEED_STAGE2_BATCHES,
                     run_config_snapshot)
from .errors import ScheduleError
from .metrics import DepthMetrics, EvalConfig, aggregate, compute_metrics
from .model import ToyDepthModel, build_model, forward_depth
from .optim import Adam
from .scenes import make_split, write_pgm16
from .subspaces import classify_layers, select_subspaces

EVAL_BATCH = 8


@dataclass
class RunResult:
    report: dict
    checkpoint_path: Path
    report_path: Path
    final_metrics: DepthMetrics


def evaluate_model(model: ToyDepthModel, dataset, eval_cfg: EvalConfig,
                   max_frames: Optional[int] = None,
                   per_frame: Optional[list] = None) -> DepthMetrics:
    """Median-scaled five-metric evaluation, averaged over the dataset."""
    n = len(dataset) if max_frames is None else min(max_frames, len(dataset))
    frame_metrics = []
    for start in range(0, n, EVAL_BATCH):
        ids = range(start, min(start + EVAL_BATCH, n))
        rgb, gt = dataset.batch(ids)
        preds = forward_depth(model, rgb)
        for offset, pred in enumerate(preds):
            entry = compute_metrics(pred, gt[offset], eval_cfg)
            frame_metrics.append(entry)
            if per_frame is not None:
                per_frame.append(entry)
    return aggregate(frame_metrics)


def evaluate_frames(predictions, ground_truths, eval_cfg: EvalConfig) -> DepthMetrics:
    """Evaluate precomputed depth maps (identity-predictor path included)."""
    return aggregate([compute_metrics(p, g, eval_cfg)
                      for p, g in zip(predictions, ground_truths)])


def _write_loss_curve(path: Path, rows: list) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "loss"])
        writer.writerows(rows)


def _write_report(path: Path, report: dict) -> None:
    path.write_text(json.dumps(report, indent=2) + "\n")


def _param_and_memory(model: ToyDepthModel, cfg: RunConfig, stage: int) -> dict:
    registry = classify_layers(model)
    counts = adapters_mod.trainable_param_count(
        model.adapter_set, registry, stage=stage,
        stage2_rank=cfg.stage2.rank if stage == 2 else None)
    return {
        "param_counts": counts.as_dict(),
        "memory": {
            "full_adam": stage2_mod.memory_footprint(registry, "full-adam", cfg.stage2.rank).as_dict(),
            "projected": stage2_mod.memory_footprint(registry, "projected", cfg.stage2.rank).as_dict(),
        },
    }


def run_stage1(cfg: RunConfig, out_dir: Optional[str] = None,
               steps: Optional[int] = None,
               progress: Optional[Callable[[int, float], None]] = None) -> RunResult:
    """Adapter-only training; emits checkpoint, loss curve, and JSON report."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    total_steps = cfg.stage1.steps if steps is None else steps
    started = time.perf_counter()

    train_set, val_set, _ = make_split(cfg.scenes, cfg.split.train, cfg.split.val, cfg.split.test)
    model = build_model(cfg.model)
    registry = classify_layers(model)
    selection = select_subspaces(registry, cfg.stage1.subspaces)
    adapter_set = adapters_mod.attach(model, selection, cfg.stage1.rank,
                                      cfg.seed + SEED_ADAPTERS)
    hash_before = model.base_weight_hash()
    step0_metrics = evaluate_model(model, val_set, cfg.eval)

    optimizer = Adam(adapter_set.parameters(), lr=cfg.stage1.lr)
    sampler = np.random.Generator(np.random.PCG64(cfg.seed + SEED_STAGE1_BATCHES))
    curve = []
    for step in range(1, total_steps + 1):
        ids = sampler.integers(0, len(train_set), size=cfg.stage1.batch_size)
        rgb, gt = train_set.batch(ids)
        loss = model.batch_loss(rgb, gt)
        grads = ad.backward(loss)
        optimizer.step(grads)
        if step % cfg.stage1.log_every == 0 or step == total_steps:
            curve.append((step, loss.item()))
            if progress is not None:
                progress(step, loss.item())
    hash_after = model.base_weight_hash()

    final_metrics = evaluate_model(model, val_set, cfg.eval)
    snapshot = run_config_snapshot(cfg)
    ckpt_path = save_checkpoint(out / "checkpoint", model, stage=1, step=total_steps,
                                config_snapshot=snapshot, adapter_set=adapter_set)
    curve_path = out / "loss_curve.csv"
    _write_loss_curve(curve_path, curve)
    report = {
        "stage": 1,
        "steps": total_steps,
        "seed": cfg.seed,
        "subspaces": list(cfg.stage1.subspaces),
        "step0_val_metrics": step0_metrics.rounded(),
        "final_val_metrics": final_metrics.rounded(),
        "base_weight_hash_before": hash_before,
        "base_weight_hash_after": hash_after,
        "base_frozen": hash_before == hash_after,
        **_param_and_memory(model, cfg, stage=1),
        "loss_curve_csv": curve_path.name,
        "checkpoint": ckpt_path.name,
        "wall_time_s": round(time.perf_counter() - started, 3),
        "config": snapshot,
    }
    report_path = out / "report.json"
    _write_report(report_path, report)
    return RunResult(report, ckpt_path, report_path, final_metrics)


def run_stage2(cfg: RunConfig, resume: str, out_dir: Optional[str] = None,
               steps: Optional[int] = None,
               progress: Optional[Callable[[int, float], None]] = None) -> RunResult:
    """Full-parameter composition training from a stage-1 checkpoint."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    total_steps = cfg.stage2.steps if steps is None else steps
    started = time.perf_counter()

    loaded = load_checkpoint(resume)
    if loaded.stage != 1:
        raise ScheduleError(f"stage 2 resumes from a stage-1 checkpoint, got stage "
                            f"{loaded.stage} at {resume}")
    model = loaded.model
    adapters_mod.merge_all(model)
    model.set_base_requires_grad(True)
    registry = classify_layers(model)
    states = stage2_mod.init_states(model, registry, cfg.stage2.rank,
                                    cfg.stage2.refresh_period)

    train_set, val_set, _ = make_split(cfg.scenes, cfg.split.train, cfg.split.val, cfg.split.test)
    step0_metrics = evaluate_model(model, val_set, cfg.eval)

    sampler = np.random.Generator(np.random.PCG64(cfg.seed + SEED_STAGE2_BATCHES))
    curve = []
    for step in range(1, total_steps + 1):
        ids = sampler.integers(0, len(train_set), size=cfg.stage2.batch_size)
        batch = train_set.batch(ids)
        loss_value = stage2_mod.stage2_step(model, batch, states, cfg.stage2.lr,
                                            cfg.stage2.alpha_beta_lr)
        if step % cfg.stage2.log_every == 0 or step == total_steps:
            curve.append((step, loss_value))
            if progress is not None:
                progress(step, loss_value)

    final_metrics = evaluate_model(model, val_set, cfg.eval)
    snapshot = run_config_snapshot(cfg)
    ckpt_path = save_checkpoint(out / "checkpoint", model, stage=2, step=total_steps,
                                config_snapshot=snapshot, stage2_states=states)
    curve_path = out / "loss_curve.csv"
    _write_loss_curve(curve_path, curve)
    alpha_values = {lid: float(s.alpha.data) for lid, s in states.items()}
    beta_values = {lid: float(s.beta.data) for lid, s in states.items()}
    report = {
        "stage": 2,
        "steps": total_steps,
        "seed": cfg.seed,
        "resume": str(resume),
        "step0_val_metrics": step0_metrics.rounded(),
        "final_val_metrics": final_metrics.rounded(),
        "alpha": {k: round(v, 6) for k, v in alpha_values.items()},
        "beta": {k: round(v, 6) for k, v in beta_values.items()},
        **_param_and_memory(model, cfg, stage=2),
        "loss_curve_csv": curve_path.name,
        "checkpoint": ckpt_path.name,
        "wall_time_s": round(time.perf_counter() - started, 3),
        "config": snapshot,
    }
    report_path = out / "report.json"
    _write_report(report_path, report)
    return RunResult(report, ckpt_path, report_path, final_metrics)


ABLATION_ROWS = (
    ("mlp", ("mlp",)),
    ("mlp+conv", ("conv", "mlp")),
    ("mlp+conv+attention", ("conv", "mlp", "attention")),
)


def run_ablation(cfg: RunConfig, out_dir: Optional[str] = None,
                 steps: Optional[int] = None) -> dict:
    """Stage-1 runs over nested subspace selections, same seed, one table."""
    from dataclasses import replace

    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, kinds in ABLATION_ROWS:
        row_cfg = replace(cfg, stage1=replace(cfg.stage1, subspaces=kinds))
        result = run_stage1(row_cfg, out_dir=out / f"row_{label.replace('+', '_')}",
                            steps=steps)
        rows.append({
            "label": label,
            "subspaces": list(kinds),
            "metrics": result.final_metrics.rounded(),
            "trainable_adapter_params": result.report["param_counts"]["adapter_params"],
        })
    table = {"rows": rows, "seed": cfg.seed,
             "steps": steps if steps is not None else cfg.stage1.steps}
    _write_report(out / "ablation.json", table)
    return table


def dump_depth_maps(model: ToyDepthModel, dataset, out_dir, min_depth: float,
                    max_depth: float, count: Optional[int] = None,
                    with_gt: bool = False) -> list:
    """16-bit PGM dumps of predicted depth, normalized over [min_depth, max_depth].

    With with_gt, each prediction gets a matching ground-truth PGM and a
    side-by-side pairing (prediction left, ground truth right).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(dataset) if count is None else min(count, len(dataset))
    span = max_depth - min_depth

    def quantize(depth):
        unit = np.clip((depth.astype(np.float64) - min_depth) / span, 0.0, 1.0)
        return np.round(unit * 65535.0)

    written = []
    for start in range(0, n, EVAL_BATCH):
        ids = range(start, min(start + EVAL_BATCH, n))
        rgb, gt = dataset.batch(ids)
        preds = forward_depth(model, rgb)
        for offset, pred in enumerate(preds):
            i = start + offset
            pred_path = out / f"pred_{i:04d}.pgm"
            write_pgm16(pred_path, quantize(pred))
            written.append(pred_path)
            if with_gt:
                gt_q = quantize(gt[offset])
                write_pgm16(out / f"gt_{i:04d}.pgm", gt_q)
                write_pgm16(out / f"pair_{i:04d}.pgm",
                            np.concatenate([quantize(pred), gt_q], axis=1))
    return written


def load_for_eval(checkpoint_path) -> LoadedCheckpoint:
    return load_checkpoint(checkpoint_path)
