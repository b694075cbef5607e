"""Command line entry point: ``segpipe <command> ...``.

Exit codes: 0 success, 1 I/O error, 2 validation or user error,
3 test-partition access by a guarded stage.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from . import __version__, evaluate, inference, planner, preprocess, taskconv, trainer
from .augment import AugmentationConfig
from .errors import CheckpointError, IoError, LeakageError, SegPipeError
from .model import load_checkpoint

DATA_ROOT_ENV = "SEGPIPE_DATA_ROOT"
EXIT_OK, EXIT_IO, EXIT_USER, EXIT_LEAK = 0, 1, 2, 3

log = logging.getLogger("segpipe")


class UsageError(SegPipeError):
    """Bad arguments or missing prerequisites, with a remediation hint."""


# ------------------------------------------------------------------ layout


def data_root(args) -> Path:
    root = args.data_root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise UsageError(f"no data root: pass --data-root or set {DATA_ROOT_ENV}")
    return Path(root)


def raw_dir(root: Path, task: str) -> Path:
    return root / "raw" / task


def preprocessed_dir(root: Path, task: str, planner_name: str) -> Path:
    return root / "preprocessed" / task / planner_name


def runs_dir(root: Path) -> Path:
    return root / "runs"


def _require_task(root: Path, task: str) -> Path:
    d = raw_dir(root, task)
    if not (d / taskconv.MANIFEST_NAME).is_file():
        raise UsageError(f"task {task} not found under {root / 'raw'}; run `segpipe convert` first")
    return d


# -------------------------------------------------------------- commands


def cmd_convert(args) -> dict:
    root = data_root(args)
    cases, desc = taskconv.load_source_spec(args.source_spec)
    manifest = taskconv.convert_task(
        cases, root / "raw", args.task, args.test_fraction, args.seed, desc, args.force, args.jobs
    )
    train_ids, test_ids = manifest.cases("train"), manifest.cases("test")
    return {
        "task": args.task,
        "task_dir": str(raw_dir(root, args.task)),
        "train_cases": len(train_ids),
        "test_cases": len(test_ids),
        "files": len(manifest.files),
        "_text": f"converted {args.task}: {len(train_ids)} training / {len(test_ids)} test cases",
    }


def cmd_validate(args) -> dict:
    root = data_root(args)
    report = taskconv.validate_task(raw_dir(root, args.task))
    out = report.to_dict()
    lines = [f"{f.severity}: [{f.code}] {f.message}" for f in report.findings]
    out["_text"] = "\n".join(lines + [f"{args.task}: {'ok' if report.ok else 'INVALID'}"])
    if not report.ok:
        out["_exit"] = EXIT_USER
    return out


def _fingerprint_and_plan(args, root: Path):
    task_dir = _require_task(root, args.task)
    guard = taskconv.guard_paths("preprocess", task_dir)
    fp = planner.fingerprint_dataset(task_dir, args.sample_size, args.seed, guard, args.jobs)
    plan = planner.PLANNERS[args.planner](fp)
    return task_dir, guard, plan


def cmd_plan(args) -> dict:
    root = data_root(args)
    _, _, plan = _fingerprint_and_plan(args, root)
    path = planner.write_plan(plan, preprocessed_dir(root, args.task, args.planner) / "plan.json")
    return {
        "task": args.task,
        "planner": args.planner,
        "plan_path": str(path),
        "plan_hash": planner.plan_hash(plan),
        "target_spacing": None if plan.target_spacing is None else list(plan.target_spacing),
        "target_shape": None if plan.target_shape is None else list(plan.target_shape),
        "_text": f"wrote {path}",
    }


def cmd_preprocess(args) -> dict:
    root = data_root(args)
    task_dir, guard, plan = _fingerprint_and_plan(args, root)
    summary = preprocess.preprocess_dataset(task_dir, plan, preprocessed_dir(root, args.task, args.planner), guard, args.jobs)
    summary["plan_hash"] = planner.plan_hash(plan)
    state = "up to date" if summary["up_to_date"] else f"{summary['processed']} processed, {summary['skipped']} skipped"
    summary["_text"] = f"{args.task}/{args.planner}: {summary['cases']} cases ({state})"
    return summary


_TRAIN_FLAGS = {
    "fold": "fold",
    "k": "k",
    "seed": "seed",
    "steps": "total_steps",
    "batch_size": "batch_size",
    "steps_per_epoch": "steps_per_epoch",
    "lr": "lr0",
    "mem_budget": "mem_budget",
    "patch": "patch_size",
    "plane": "plane_axis",
    "fg_p": "fg_p",
}


def experiment_values(args) -> dict:
    """Defaults, overridden by the ``--config`` file, overridden by flags."""
    values: dict = {}
    if args.config:
        try:
            values.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except OSError as exc:
            raise IoError(f"cannot read config file {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from exc
    values["task"] = args.task
    values["planner"] = args.planner
    model = args.model or values.get("model", "unet3d")
    values["model"] = model
    for flag, key in _TRAIN_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            values[key] = v
    spec = dict(values.get("spec", {}))
    spec["dim"] = 3 if model == "unet3d" else 2
    for flag in ("depth", "base_channels"):
        if getattr(args, flag) is not None:
            spec[flag] = getattr(args, flag)
    values["spec"] = spec
    if args.no_augment:
        values["augmentation"] = AugmentationConfig.disabled().to_dict()
    return values


def cmd_train(args) -> dict:
    root = data_root(args)
    task_dir = _require_task(root, args.task)
    pre = preprocessed_dir(root, args.task, args.planner)
    if not (pre / "plan.json").is_file() or not preprocess.list_preprocessed(pre):
        raise UsageError(
            f"no preprocessed data in {pre}; run `segpipe preprocess {args.task} --planner {args.planner}` first"
        )
    values = experiment_values(args)
    plan = planner.read_plan(pre / "plan.json")
    spec = values["spec"]
    spec.setdefault("in_channels", plan.fingerprint.channels)
    spec.setdefault("num_classes", max(2, max(plan.fingerprint.labels) + 1))
    try:
        cfg = trainer.ExperimentConfig.from_dict(values)
    except TypeError as exc:
        raise UsageError(f"invalid experiment config: {exc}") from exc

    def echo(row):
        if "val_dice" in row and not args.json:
            print(f"step {row['step']}: loss {row['loss']:.4f} val_dice {row['val_dice']:.4f}", flush=True)

    run = trainer.train(
        cfg,
        pre,
        runs_dir(root),
        guard=taskconv.guard_paths("train", task_dir),
        resume=not args.new_version,
        stop_after=args.stop_after,
        echo=echo,
    )
    ckpt = load_checkpoint(run / trainer.LATEST)
    rows = trainer.read_log(run)
    vals = [r["val_dice"] for r in rows if "val_dice" in r]
    return {
        "run_dir": str(run),
        "step": ckpt.step,
        "total_steps": cfg.total_steps,
        "finished": ckpt.step >= cfg.total_steps,
        "best_val_dice": max(vals) if vals else None,
        "patch_size": ckpt.extra.get("patch_size"),
        "_text": f"{run}: step {ckpt.step}/{cfg.total_steps}",
    }


def _resolve_checkpoint(p: Path) -> Path:
    if p.is_dir():
        for name in (trainer.BEST, trainer.LATEST):
            if (p / name).is_file():
                return p / name
        raise UsageError(f"{p} holds no checkpoint")
    return p


def _plane_checkpoints(root: Path, args) -> list:
    out = []
    for axis in args.planes:
        fdir = runs_dir(root) / args.task / args.planner / f"unet2d_plane{axis}" / f"fold_{args.fold}"
        versions = trainer.list_versions(fdir)
        if not versions:
            raise UsageError(f"no trained 2D model for plane {axis} in {fdir}; run `segpipe train --model unet2d --plane {axis}`")
        out.append(_resolve_checkpoint(fdir / f"version_{versions[-1]}"))
    return out


def cmd_predict(args) -> dict:
    root = data_root(args)
    task_dir = _require_task(root, args.task)
    ckpts = [_resolve_checkpoint(Path(p)) for p in (args.checkpoints or [])]
    if args.planes:
        ckpts += _plane_checkpoints(root, args)
    if not ckpts:
        raise UsageError("give --checkpoints and/or --planes")
    loaded = []
    for p in ckpts:
        try:
            loaded.append(load_checkpoint(p))
        except CheckpointError as exc:
            raise UsageError(str(exc)) from exc
    plans = [planner.read_plan(p) for p in sorted((root / "preprocessed" / args.task).glob("*/plan.json"))]
    if not plans:
        raise UsageError(f"no plan for {args.task}; run `segpipe preprocess` first")
    input_dir = Path(args.input) if args.input else task_dir / "imagesTs"
    out = Path(args.out)
    done = inference.predict_folder(
        loaded, input_dir, plans, out, args.overlap, not args.no_gaussian, args.allow_plan_mismatch
    )
    return {
        "out_dir": str(out),
        "cases": done,
        "checkpoints": [str(p) for p in ckpts],
        "ensemble": len(ckpts) > 1,
        "_text": f"wrote {len(done)} prediction(s) to {out}",
    }


def cmd_evaluate(args) -> dict:
    out = Path(args.out) if args.out else Path(args.pred) / "results.json"
    res = evaluate.evaluate_folder(args.pred, args.gt, args.labels, out, out.with_suffix(".csv") if args.csv else None)
    agg = {lab: m["dice"]["mean"] for lab, m in res["aggregate"].items()}
    text = [f"{len(res['cases'])} case(s)"] + [f"label {lab}: mean dice {d:.4f}" for lab, d in agg.items()]
    return {
        "results_path": str(out),
        "cases": len(res["cases"]),
        "mean_dice": agg,
        "_text": "\n".join(text),
    }


COMMANDS = {
    "convert": cmd_convert,
    "validate": cmd_validate,
    "plan": cmd_plan,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


# ------------------------------------------------------------------ parser


def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; their defaults are suppressed so a
    # flag given before the subcommand is not reset after it
    def d(value):
        return argparse.SUPPRESS if suppress else value

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data-root", default=d(None), help=f"data root (default: ${DATA_ROOT_ENV})")
    common.add_argument("--json", action="store_true", default=d(False), help="machine-readable output")
    common.add_argument("--jobs", type=int, default=d(os.cpu_count() or 1), help="worker threads (default: logical cores)")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags(suppress=True)
    p = argparse.ArgumentParser(prog="segpipe", description=__doc__.splitlines()[0], parents=[_common_flags(suppress=False)])
    p.add_argument("--version", action="version", version=f"segpipe {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("convert", parents=[common], help="raw cases -> task layout")
    c.add_argument("source_spec", help="JSON file listing the source cases")
    c.add_argument("task", help="task name, e.g. Task001_Spheres")
    c.add_argument("--test-fraction", type=float, default=0.2)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--force", action="store_true", help="replace an existing task with different content")

    c = sub.add_parser("validate", parents=[common], help="check a converted task")
    c.add_argument("task")

    for name, helptext in (("plan", "fingerprint the dataset and write plan.json"), ("preprocess", "plan, then preprocess the training cases")):
        c = sub.add_parser(name, parents=[common], help=helptext)
        c.add_argument("task")
        c.add_argument("--planner", choices=sorted(planner.PLANNERS), default="default")
        c.add_argument("--sample-size", type=int, default=planner.DEFAULT_SAMPLE_SIZE)
        c.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("train", parents=[common], help="train (or resume) a model")
    c.add_argument("task")
    c.add_argument("--planner", choices=sorted(planner.PLANNERS), default="default")
    c.add_argument("--model", choices=trainer.MODELS)
    c.add_argument("--plane", type=int, choices=(0, 1, 2), help="slice axis of a 2D model")
    c.add_argument("--fold", type=int)
    c.add_argument("--k", type=int, help="number of folds (1 = single holdout split)")
    c.add_argument("--seed", type=int)
    c.add_argument("--steps", type=int)
    c.add_argument("--batch-size", type=int)
    c.add_argument("--steps-per-epoch", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--mem-budget", type=int, help="bytes available for activations")
    c.add_argument("--patch", type=int, nargs="+", help="explicit patch size")
    c.add_argument("--depth", type=int)
    c.add_argument("--base-channels", type=int)
    c.add_argument("--fg-p", type=float)
    c.add_argument("--no-augment", action="store_true")
    c.add_argument("--config", help="JSON experiment config; flags override it")
    c.add_argument("--new-version", action="store_true", help="never resume; always start a new version")
    c.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)

    c = sub.add_parser("predict", parents=[common], help="predict test images")
    c.add_argument("task")
    c.add_argument("--checkpoints", nargs="+", help="checkpoint files or run directories")
    c.add_argument("--planes", type=int, nargs="+", choices=(0, 1, 2), help="add the latest 2D model of each plane")
    c.add_argument("--planner", choices=sorted(planner.PLANNERS), default="default")
    c.add_argument("--fold", type=int, default=0)
    c.add_argument("--overlap", type=float, default=inference.DEFAULT_OVERLAP)
    c.add_argument("--no-gaussian", action="store_true", help="uniform window weights")
    c.add_argument("--input", help="image folder (default: the task's imagesTs)")
    c.add_argument("--out", required=True)
    c.add_argument("--allow-plan-mismatch", action="store_true")

    c = sub.add_parser("evaluate", parents=[common], help="score predictions against ground truth")
    c.add_argument("--pred", required=True)
    c.add_argument("--gt", required=True)
    c.add_argument("--labels", type=int, nargs="+", required=True)
    c.add_argument("--out", help="results file (default: <pred>/results.json)")
    c.add_argument("--csv", action="store_true", help="also write a flat CSV next to the results")
    return p


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, preprocess.CaseError) and isinstance(exc.cause, (SegPipeError, OSError)):
        return exit_code_for(exc.cause)
    if isinstance(exc, LeakageError):
        return EXIT_LEAK
    if isinstance(exc, (IoError, CheckpointError)):
        return EXIT_IO
    if isinstance(exc, SegPipeError):
        return EXIT_USER
    return EXIT_IO


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
        code = result.pop("_exit", EXIT_OK)
        text = result.pop("_text", "")
        if args.json:
            print(json.dumps({"command": args.command, "ok": code == EXIT_OK, "exit_code": code, "result": result}, sort_keys=True))
        elif text:
            print(text)
        return code
    except (SegPipeError, OSError) as exc:
        code = exit_code_for(exc)
        if args.json:
            print(json.dumps({"command": args.command, "ok": False, "exit_code": code, "error": type(exc).__name__, "message": str(exc)}, sort_keys=True))
        else:
            print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
