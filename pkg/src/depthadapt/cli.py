"""Command-line harness: train, ablate, eval, report, dump-depth, info.

Exit code 0 on success; failures print a category-coded message
(``error[<category>]: ...``) and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import adapters as adapters_mod
from . import stage2 as stage2_mod
from . import training
from .config import load_run_config
from .errors import ConfigError, DepthAdaptError, ScheduleError
from .metrics import DepthMetrics, EvalConfig
from .reporting import relative_change_report, render_change_table, render_metrics_table
from .scenes import load_dataset_dir, make_split
from .subspaces import ALL_KINDS, classify_layers, parse_kinds, registry_json


def _apply_common_overrides(cfg, args):
    if getattr(args, "seed", None) is not None:
        from .config import SEED_MODEL, SEED_SCENES
        cfg = replace(cfg, seed=args.seed,
                      model=replace(cfg.model, seed=args.seed + SEED_MODEL),
                      scenes=replace(cfg.scenes, seed=args.seed + SEED_SCENES))
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "subspaces", None) is not None:
        kinds = parse_kinds(args.subspaces)
        ordered = tuple(k.value for k in ALL_KINDS if k in kinds)
        cfg = replace(cfg, stage1=replace(cfg.stage1, subspaces=ordered))
    return cfg


def _pick_split(cfg, name: str):
    train, val, test = make_split(cfg.scenes, cfg.split.train, cfg.split.val, cfg.split.test)
    return {"train": train, "val": val, "test": test}[name]


def cmd_train(args) -> int:
    cfg = _apply_common_overrides(load_run_config(args.config), args)
    if args.stage == 2:
        if args.resume is None:
            raise ScheduleError("stage 2 requires --resume with a stage-1 checkpoint")
        result = training.run_stage2(cfg, args.resume, steps=args.steps,
                                     progress=_progress(args))
    else:
        result = training.run_stage1(cfg, steps=args.steps, progress=_progress(args))
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"report:     {result.report_path}")
    print("final validation metrics:", json.dumps(result.final_metrics.rounded()))
    return 0


def _progress(args):
    if getattr(args, "quiet", False):
        return None
    return lambda step, loss: print(f"step {step:>6}  loss {loss:.6f}")


def cmd_ablate(args) -> int:
    cfg = _apply_common_overrides(load_run_config(args.config), args)
    table = training.run_ablation(cfg, steps=args.steps)
    rows = [(row["label"], DepthMetrics.from_dict(row["metrics"]),
             str(row["trainable_adapter_params"])) for row in table["rows"]]
    print(render_metrics_table(rows))
    print(f"ablation table: {Path(cfg.out_dir) / 'ablation.json'}")
    return 0


def cmd_eval(args) -> int:
    loaded = training.load_for_eval(args.checkpoint)
    cfg = loaded.config
    eval_cfg = cfg.eval
    if args.data_dir is not None:
        dataset = load_dataset_dir(args.data_dir)
    else:
        dataset = _pick_split(cfg, args.split)
    per_frame: list = []
    if args.identity:
        frames = [dataset.frame(i) for i in range(len(dataset))]
        per_frame = [training.compute_metrics(gt, gt, eval_cfg) for _, gt in frames]
        metrics = training.aggregate(per_frame)
    else:
        metrics = training.evaluate_model(loaded.model, dataset, eval_cfg,
                                          per_frame=per_frame)
    payload = metrics.rounded()
    print(json.dumps(payload, indent=2))
    if args.out is not None:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    if args.per_frame_csv is not None:
        import csv as csv_mod
        with open(args.per_frame_csv, "w", newline="") as handle:
            writer = csv_mod.writer(handle)
            writer.writerow(["frame"] + list(DepthMetrics.FIELDS))
            for i, entry in enumerate(per_frame):
                writer.writerow([i] + [f"{getattr(entry, n):.5f}" for n in DepthMetrics.FIELDS])
    return 0


def _load_metrics_file(path: str) -> DepthMetrics:
    try:
        return DepthMetrics.from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError:
        raise ConfigError(f"metrics file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None


def cmd_report(args) -> int:
    baseline = _load_metrics_file(args.baseline)
    candidate = _load_metrics_file(args.candidate)
    report = relative_change_report(baseline, candidate)
    print(render_change_table(report))
    if args.out is not None:
        Path(args.out).write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    return 0


def cmd_dump_depth(args) -> int:
    loaded = training.load_for_eval(args.checkpoint)
    cfg = loaded.config
    dataset = _pick_split(cfg, args.split)
    written = training.dump_depth_maps(loaded.model, dataset, args.out,
                                       cfg.model.min_depth, cfg.model.max_depth,
                                       count=args.count, with_gt=args.with_gt)
    print(f"wrote {len(written)} depth maps to {args.out}")
    return 0


def cmd_info(args) -> int:
    cfg = _apply_common_overrides(load_run_config(args.config), args)
    model = training.build_model(cfg.model)
    registry = classify_layers(model)
    counts = registry.counts()
    params = adapters_mod.trainable_param_count(None, registry)
    print(registry_json(registry))
    print(json.dumps({
        "counts": {"conv": counts[0], "mlp": counts[1], "attention": counts[2]},
        "base_params": params.base_params,
        "adapter_params_at_rank": {
            str(cfg.stage1.rank): sum(cfg.stage1.rank * (d.m + d.n)
                                      for d in registry.all_layers())},
        "memory": {
            "full_adam": stage2_mod.memory_footprint(registry, "full-adam",
                                                     cfg.stage2.rank).total_floats,
            "projected": stage2_mod.memory_footprint(registry, "projected",
                                                     cfg.stage2.rank).total_floats,
        },
    }, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthadapt",
        description="Two-stage subspace adaptation harness for the toy depth model.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run stage-1 or stage-2 training")
    train.add_argument("--config", default=None, help="flat key-value config file")
    train.add_argument("--stage", type=int, choices=(1, 2), default=1)
    train.add_argument("--resume", default=None, help="stage-1 checkpoint (stage 2 only)")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--out", default=None, help="output directory")
    train.add_argument("--subspaces", default=None,
                       help="comma-separated kinds, e.g. mlp,conv")
    train.add_argument("--steps", type=int, default=None, help="override step count")
    train.add_argument("--quiet", action="store_true")
    train.set_defaults(func=cmd_train)

    ablate = sub.add_parser("ablate", help="stage-1 ablation over subspace selections")
    ablate.add_argument("--config", default=None)
    ablate.add_argument("--seed", type=int, default=None)
    ablate.add_argument("--out", default=None)
    ablate.add_argument("--steps", type=int, default=None)
    ablate.set_defaults(func=cmd_ablate)

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--split", choices=("train", "val", "test"), default="test")
    evaluate.add_argument("--data-dir", default=None,
                          help="evaluate a dumped dataset directory instead of a split")
    evaluate.add_argument("--per-frame-csv", default=None)
    evaluate.add_argument("--out", default=None, help="write metrics JSON here")
    evaluate.add_argument("--identity", action="store_true",
                          help="score ground truth against itself (protocol sanity check)")
    evaluate.set_defaults(func=cmd_eval)

    report = sub.add_parser("report", help="relative-change report between metric files")
    report.add_argument("--baseline", required=True)
    report.add_argument("--candidate", required=True)
    report.add_argument("--out", default=None)
    report.set_defaults(func=cmd_report)

    dump = sub.add_parser("dump-depth", help="write 16-bit PGM depth visualizations")
    dump.add_argument("--checkpoint", required=True)
    dump.add_argument("--split", choices=("train", "val", "test"), default="test")
    dump.add_argument("--out", required=True)
    dump.add_argument("--count", type=int, default=None)
    dump.add_argument("--with-gt", action="store_true")
    dump.set_defaults(func=cmd_dump_depth)

    info = sub.add_parser("info", help="registry, parameter, and memory accounting")
    info.add_argument("--config", default=None)
    info.add_argument("--seed", type=int, default=None)
    info.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DepthAdaptError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
