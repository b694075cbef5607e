"""Splits, patch-size inference, patch sampling and the training loop.

Every random draw in the loop is derived from ``(global seed, step, item)``
through :func:`stable_seed`, so a run resumed from a checkpoint replays the
same batches as an uninterrupted one without storing generator state.
"""
from __future__ import annotations

import json
import logging
import math
import random
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import imagecore
from .augment import AugmentationConfig, apply_transforms, item_seed, sample_transforms
from .errors import (
    BudgetError,
    CheckpointError,
    DomainError,
    NumericsError,
    ResumeConflict,
    SplitError,
    SplitFormatError,
)
from .evaluate import confusion_counts, metrics_from_counts
from .inference import predict_plane_stack, sliding_window_predict
from .model import (
    ModelSpec,
    UNetPredictor,
    dice_ce_loss,
    forward_with_cache,
    backward,
    init_params,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
)
from .planner import Fingerprint, plan_hash, read_plan, stable_seed
from .preprocess import CaseRecord, list_preprocessed, load_case
from .taskconv import PathGuard, atomic_write_text, canonical_json

log = logging.getLogger(__name__)

SPLITS_NAME = "splits.json"
SPLITS_VERSION = 1
DEFAULT_MEM_BUDGET = 512 * 2 ** 20
LATEST = "checkpoint_latest.ckpt"
BEST = "checkpoint_best.ckpt"
MODELS = ("unet2d", "unet3d")


# ------------------------------------------------------------------ splits


@dataclass(frozen=True)
class Splits:
    k: int
    seed: int
    folds: tuple  # per fold: sorted validation case ids
    holdout: Optional[float] = None

    def val(self, fold: int) -> list:
        if not 0 <= fold < len(self.folds):
            raise SplitError(f"fold {fold} out of range for {len(self.folds)} fold(s)")
        return list(self.folds[fold])

    def train(self, fold: int, all_ids: Sequence[str]) -> list:
        v = set(self.val(fold))
        return [c for c in sorted(all_ids) if c not in v]

    def case_ids(self) -> list:
        return sorted(c for f in self.folds for c in f)

    def to_dict(self) -> dict:
        return {
            "format_version": SPLITS_VERSION,
            "k": self.k,
            "seed": self.seed,
            "holdout": self.holdout,
            "folds": [list(f) for f in self.folds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Splits":
        if not isinstance(d, dict) or set(d) != {"format_version", "k", "seed", "holdout", "folds"}:
            raise SplitFormatError("splits file does not match the expected schema")
        if d["format_version"] != SPLITS_VERSION:
            raise SplitFormatError(f"unsupported splits format_version {d['format_version']!r}")
        folds = d["folds"]
        if not isinstance(folds, list) or not all(isinstance(f, list) and all(isinstance(c, str) for c in f) for f in folds):
            raise SplitFormatError("folds must be lists of case ids")
        if not isinstance(d["k"], int) or len(folds) != d["k"]:
            raise SplitFormatError("number of folds does not match k")
        seen = [c for f in folds for c in f]
        if len(seen) != len(set(seen)) and d["k"] > 1:
            raise SplitFormatError("folds overlap")
        return cls(int(d["k"]), int(d["seed"]), tuple(tuple(f) for f in folds), d["holdout"])


def make_splits(case_ids: Sequence[str], k: int = 5, seed: int = 0, holdout: float = 0.2) -> Splits:
    """Seeded shuffle of the sorted ids, then round-robin into ``k`` folds.

    ``k = 1`` is single-split mode: one fold holding ``ceil(holdout * N)``
    validation cases.
    """
    ids = sorted(set(case_ids))
    if k < 1:
        raise SplitError("k must be >= 1")
    order = list(ids)
    random.Random(seed).shuffle(order)
    if k == 1:
        if not 0.0 < holdout < 1.0:
            raise SplitError("holdout fraction must lie in (0, 1)")
        n_val = math.ceil(round(len(ids) * holdout, 9))
        if len(ids) < 2 or n_val >= len(ids):
            raise SplitError(f"cannot hold out {n_val} of {len(ids)} cases")
        return Splits(1, seed, (tuple(sorted(order[:n_val])),), holdout)
    if len(ids) < k:
        raise SplitError(f"{len(ids)} cases cannot be split into {k} folds")
    folds = [sorted(order[i::k]) for i in range(k)]
    return Splits(k, seed, tuple(tuple(f) for f in folds))


def get_or_create_splits(preprocessed_dir, k: int = 5, seed: int = 0, holdout: float = 0.2) -> Splits:
    """Load ``splits.json`` if present (its stored k/seed win), else create and persist it."""
    pre = Path(preprocessed_dir)
    path = pre / SPLITS_NAME
    if path.exists():
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SplitFormatError(f"{path} is unreadable: {exc}") from exc
        return Splits.from_dict(d)
    splits = make_splits(list_preprocessed(pre), k, seed, holdout)
    atomic_write_text(path, canonical_json(splits.to_dict()))
    return splits


# ------------------------------------------------------------ patch sizing


def activation_bytes(patch: Sequence[int], spec: ModelSpec, batch_size: int = 2, dtype_bytes: int = 4) -> int:
    """Closed-form activation-memory estimate of one training step.

    Sum over every stored feature map (network input, each convolution
    output, each pooled map, each upsampled map, each concatenation, the
    logits) of ``voxels * channels``; doubled for the matching gradient
    buffers, times batch size and bytes per value.
    """
    vox = [int(np.prod([p // 2 ** lv for p in patch])) for lv in range(spec.depth + 1)]
    total = vox[0] * spec.in_channels
    for lv in range(spec.depth):
        c = spec.channels(lv)
        total += 2 * vox[lv] * c  # two convolutions
        total += vox[lv + 1] * c  # pooled
    total += 2 * vox[spec.depth] * spec.channels(spec.depth)
    for lv in range(spec.depth):
        c_below = spec.channels(lv + 1)
        c = spec.channels(lv)
        total += vox[lv] * c_below  # upsampled
        total += vox[lv] * c  # up-convolution
        total += vox[lv] * 2 * c  # concatenation
        total += 2 * vox[lv] * c  # two convolutions
    total += vox[0] * spec.num_classes
    return int(2 * total * batch_size * dtype_bytes)


def infer_patch_size(shapes, spec: ModelSpec, mem_budget_bytes: int, batch_size: int = 2) -> tuple:
    """Largest patch derived from the median case shape that fits the budget.

    ``shapes`` is a :class:`Fingerprint` (its case shapes are used) or a
    sequence of preprocessed spatial shapes.  Each median side is rounded
    down to a multiple of ``2**depth`` (but not below the floor
    ``4 * 2**depth``); then, while the estimate exceeds the budget, the
    largest side (lowest axis on ties) shrinks by ``2**depth``.
    """
    if mem_budget_bytes <= 0:
        raise DomainError("memory budget must be positive")
    if isinstance(shapes, Fingerprint):
        shapes = shapes.shapes
    arr = np.asarray([tuple(s) for s in shapes], dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != spec.dim:
        raise DomainError(f"need {spec.dim}D case shapes, got {arr.shape}")
    div = spec.divisor
    floor = 4 * div
    median = np.median(arr, axis=0)
    patch = [max(floor, int(m) // div * div) for m in median]
    while activation_bytes(patch, spec, batch_size) > mem_budget_bytes:
        largest = max(patch)
        if largest <= floor:
            raise BudgetError(
                f"memory budget {mem_budget_bytes} B is below the floor patch {tuple(patch)} "
                f"({activation_bytes(patch, spec, batch_size)} B)"
            )
        patch[patch.index(largest)] -= div
    return tuple(patch)


# --------------------------------------------------------- patch sampling


def _pad_case(image: np.ndarray, label: Optional[np.ndarray], fg: Optional[np.ndarray], patch: Sequence[int]):
    spatial = image.shape[1:]
    target = tuple(max(n, p) for n, p in zip(spatial, patch))
    if target == tuple(spatial):
        return image, label, fg
    image, pad_spec = imagecore.pad_to(image, target)
    if label is not None:
        label, _ = imagecore.pad_to(label, target)
    if fg is not None and len(fg):
        fg = fg + np.asarray([b for b, _ in pad_spec], dtype=fg.dtype)
    return image, label, fg


def sample_patch(case: CaseRecord, patch, rng: np.random.Generator, fg_p: float = 0.33, plane_axis: Optional[int] = None):
    """Draw one ``(image [C, *patch], label [*patch])`` pair from a case.

    With ``plane_axis`` set, ``patch`` is 2D and the pair is cut from one
    slice orthogonal to that axis.
    """
    patch = tuple(int(p) for p in patch)
    image, label, fg = case.image, case.label, case.fg_indices
    nd = image.ndim - 1
    full_patch = patch if plane_axis is None else patch[:plane_axis] + (1,) + patch[plane_axis:]
    if len(full_patch) != nd:
        raise DomainError(f"patch {patch} does not fit a {nd}D case (plane axis {plane_axis})")
    image, label, fg = _pad_case(image, label, fg, full_patch)
    spatial = image.shape[1:]
    hi = [n - p for n, p in zip(spatial, full_patch)]
    use_fg = fg is not None and len(fg) > 0 and rng.random() < fg_p
    if use_fg:
        center = fg[rng.integers(len(fg))]
        origin = [int(min(max(int(c) - p // 2, 0), h)) for c, p, h in zip(center, full_patch, hi)]
    else:
        origin = [int(rng.integers(h + 1)) for h in hi]
    sl = tuple(slice(o, o + p) for o, p in zip(origin, full_patch))
    img = image[(slice(None),) + sl]
    lab = label[sl] if label is not None else None
    if plane_axis is not None:
        img = np.take(img, 0, axis=plane_axis + 1)
        lab = np.take(lab, 0, axis=plane_axis) if lab is not None else None
    return np.ascontiguousarray(img, dtype=np.float32), (None if lab is None else np.ascontiguousarray(lab))


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    planner: str = "default"
    model: str = "unet3d"
    spec: ModelSpec = field(default_factory=ModelSpec)
    fold: int = 0
    k: int = 5
    holdout: float = 0.2
    seed: int = 0
    total_steps: int = 1000
    batch_size: int = 2
    steps_per_epoch: int = 50
    lr0: float = 0.01
    momentum: float = 0.9
    lr_power: float = 0.9
    mem_budget: int = DEFAULT_MEM_BUDGET
    patch_size: Optional[tuple] = None
    plane_axis: Optional[int] = None
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    fg_p: float = 0.33
    val_overlap: float = 0.5

    def __post_init__(self):
        if self.model not in MODELS:
            raise DomainError(f"model must be one of {MODELS}")
        if (self.model == "unet3d") != (self.spec.dim == 3):
            raise DomainError(f"model {self.model} needs a {3 if self.model == 'unet3d' else 2}D spec")
        if self.model == "unet2d" and self.plane_axis not in (0, 1, 2):
            raise DomainError("a 2D model needs plane_axis in {0, 1, 2}")
        if self.model == "unet3d" and self.plane_axis is not None:
            raise DomainError("plane_axis only applies to 2D models")
        if self.k < 1 or not 0 <= self.fold < self.k:
            raise DomainError(f"fold must satisfy 0 <= fold < k (fold={self.fold}, k={self.k})")
        if self.total_steps <= 0 or self.batch_size <= 0 or self.steps_per_epoch <= 0:
            raise DomainError("steps, batch size and steps per epoch must be positive")
        if self.mem_budget <= 0:
            raise DomainError("memory budget must be positive")
        if not 0.0 <= self.fg_p <= 1.0:
            raise DomainError("fg_p must lie in [0, 1]")
        if self.patch_size is not None:
            object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
            if len(self.patch_size) != self.spec.dim or any(p % self.spec.divisor for p in self.patch_size):
                raise DomainError(f"patch size must have {self.spec.dim} sides divisible by {self.spec.divisor}")

    @property
    def model_name(self) -> str:
        return self.model if self.plane_axis is None else f"{self.model}_plane{self.plane_axis}"

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``."""
        return self.lr0 * (1.0 - step / self.total_steps) ** self.lr_power

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        d["augmentation"] = self.augmentation.to_dict()
        d["patch_size"] = None if self.patch_size is None else list(self.patch_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["spec"] = ModelSpec(**d["spec"]) if "spec" in d else ModelSpec()
        if "augmentation" in d:
            d["augmentation"] = AugmentationConfig.from_dict(d["augmentation"])
        return cls(**d)


# ------------------------------------------------------------ run folders


_VERSION_RE = re.compile(r"^version_(\d+)$")


def fold_dir(runs_root, cfg: ExperimentConfig) -> Path:
    return Path(runs_root) / cfg.task / cfg.planner / cfg.model_name / f"fold_{cfg.fold}"


def list_versions(fdir) -> list:
    fdir = Path(fdir)
    if not fdir.is_dir():
        return []
    return sorted(int(m.group(1)) for p in fdir.iterdir() if (m := _VERSION_RE.match(p.name)) and p.is_dir())


def _select_run_dir(fdir: Path, cfg: ExperimentConfig, resume: bool):
    """Return ``(run_dir, checkpoint or None)``."""
    versions = list_versions(fdir)
    snapshot = canonical_json(cfg.to_dict())
    if versions and resume:
        last = fdir / f"version_{versions[-1]}"
        cfg_path = last / "config.json"
        old = cfg_path.read_text(encoding="utf-8") if cfg_path.is_file() else None
        ckpt_path = last / LATEST
        ckpt = None
        if ckpt_path.is_file():
            try:
                ckpt = load_checkpoint(ckpt_path)
            except CheckpointError as exc:
                raise ResumeConflict(f"{ckpt_path} cannot be resumed: {exc}") from exc
        unfinished = ckpt is None or ckpt.step < cfg.total_steps
        if unfinished:
            if old != snapshot:
                raise ResumeConflict(
                    f"{last} is an unfinished run with a different configuration; "
                    "rerun with the same settings to resume or start a new version explicitly"
                )
            return last, ckpt
    n = versions[-1] + 1 if versions else 0
    run_dir = fdir / f"version_{n}"
    run_dir.mkdir(parents=True, exist_ok=False)
    atomic_write_text(run_dir / "config.json", snapshot)
    return run_dir, None


def _read_log(path: Path, upto: int) -> list:
    rows = []
    if path.is_file():
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                row = json.loads(line)
                if row["step"] <= upto:
                    rows.append(row)
    return rows


# ---------------------------------------------------------------- training


def _load_records(pre_dir: Path, ids: Sequence[str], guard: Optional[PathGuard]) -> list:
    out = []
    for cid in ids:
        if guard is not None:
            guard.check(pre_dir / f"case_{cid}.bin")
            guard.check(pre_dir / f"case_{cid}.meta.json")
        out.append(load_case(pre_dir, cid))
    return out


def validation_dice(predictor: UNetPredictor, cases: Sequence[CaseRecord], patch, plane_axis, overlap: float) -> float:
    """Mean foreground Dice of sliding-window predictions over whole validation cases."""
    if not cases:
        return float("nan")
    K = predictor.spec.num_classes
    vals = []
    for rec in cases:
        if plane_axis is None:
            probs = sliding_window_predict(predictor, rec.image, patch, overlap, True)
        else:
            probs = predict_plane_stack(predictor, rec.image, plane_axis, patch, overlap, True)
        pred = np.argmax(probs, axis=0)
        for lab in range(1, K):
            vals.append(metrics_from_counts(confusion_counts(pred, rec.label, lab))["dice"])
    return float(np.mean(vals))


def _batch(cfg: ExperimentConfig, records: Sequence[CaseRecord], patch, step: int):
    epoch, b = divmod(step, cfg.steps_per_epoch)
    ndim = cfg.spec.dim
    xs, ys = [], []
    for i in range(cfg.batch_size):
        seed = item_seed(cfg.seed, epoch, b, i)
        rng = np.random.default_rng(stable_seed("patch", seed))
        rec = records[int(rng.integers(len(records)))]
        img, lab = sample_patch(rec, patch, rng, cfg.fg_p, cfg.plane_axis)
        img, lab = apply_transforms(img, lab, sample_transforms(cfg.augmentation, seed, ndim))
        xs.append(img)
        ys.append(lab)
    return np.stack(xs).astype(np.float32), np.stack(ys).astype(np.int64)


def _dump_diagnostics(run_dir: Path, step: int, detail: dict) -> Path:
    path = run_dir / f"numerics_failure_step{step}.json"
    atomic_write_text(path, canonical_json({"step": step, **detail}))
    return path


def train(
    cfg: ExperimentConfig,
    preprocessed_dir,
    runs_root,
    guard: Optional[PathGuard] = None,
    resume: bool = True,
    stop_after: Optional[int] = None,
    echo=None,
) -> Path:
    """Train (or resume) one experiment and return its version directory.

    ``stop_after`` ends the process-equivalent early after that many total
    steps, leaving a resumable checkpoint, as if the run had been killed.
    """
    pre = Path(preprocessed_dir)
    if guard is not None:
        guard.check(pre / "plan.json")
    plan = read_plan(pre / "plan.json")
    phash = plan_hash(plan)
    all_ids = list_preprocessed(pre)
    if not all_ids:
        raise SplitError(f"{pre} holds no preprocessed cases")
    splits = get_or_create_splits(pre, cfg.k, cfg.seed, cfg.holdout)
    if len(splits.folds) != cfg.k:
        raise SplitError(f"persisted splits have k={splits.k}, config asks for k={cfg.k}")
    val_ids = splits.val(cfg.fold)
    missing = sorted(set(val_ids) - set(all_ids))
    if missing:
        raise SplitError(f"splits reference unknown case(s): {', '.join(missing)}")
    train_ids = splits.train(cfg.fold, all_ids)
    if not train_ids:
        raise SplitError("no training cases left after removing the validation fold")
    train_recs = _load_records(pre, train_ids, guard)
    val_recs = _load_records(pre, val_ids, guard)
    if any(r.label is None for r in train_recs):
        raise DomainError("training needs segmentation labels")
    if plan.fingerprint.channels != cfg.spec.in_channels:
        raise DomainError(f"data has {plan.fingerprint.channels} channels, spec expects {cfg.spec.in_channels}")

    if cfg.patch_size is not None:
        patch = cfg.patch_size
    else:
        shapes = [r.shape for r in train_recs]
        if cfg.plane_axis is not None:
            shapes = [tuple(n for a, n in enumerate(s) if a != cfg.plane_axis) for s in shapes]
        patch = infer_patch_size(shapes, cfg.spec, cfg.mem_budget, cfg.batch_size)

    fdir = fold_dir(runs_root, cfg)
    run_dir, ckpt = _select_run_dir(fdir, cfg, resume)
    extra_base = {
        "plan_hash": phash,
        "patch_size": list(patch),
        "plane_axis": cfg.plane_axis,
        "model": cfg.model_name,
        "fold": cfg.fold,
        "rng": {"scheme": "stable_seed", "global_seed": cfg.seed},
    }
    log_path = run_dir / "log.jsonl"
    if ckpt is not None:
        params, state, start = ckpt.params, ckpt.opt_state, ckpt.step
        best = ckpt.extra.get("best_val_dice")
        rows = _read_log(log_path, start)
    else:
        params, state, start, best, rows = init_params(cfg.spec, cfg.seed), {}, 0, None, []
    # drop any lines written after the checkpoint we resume from
    atomic_write_text(log_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))

    def save(name: str, step: int):
        save_checkpoint(run_dir / name, cfg.spec, params, state, step, {**extra_base, "best_val_dice": best})

    t0 = time.perf_counter()
    end = cfg.total_steps if stop_after is None else min(cfg.total_steps, stop_after)
    with open(log_path, "a", encoding="utf-8") as logf:
        for t in range(start, end):
            x, y = _batch(cfg, train_recs, patch, t)
            logits, cache = forward_with_cache(params, cfg.spec, x)
            loss, dz = dice_ce_loss(logits, y)
            if not math.isfinite(loss):
                where = _dump_diagnostics(run_dir, t + 1, {"loss": repr(loss), "lr": cfg.lr_at(t)})
                raise NumericsError(f"non-finite loss at step {t + 1}; diagnostics in {where}")
            grads = backward(params, cfg.spec, x, dz, cache)
            lr = cfg.lr_at(t)
            try:
                params, state = optimizer_step(params, grads, state, lr, cfg.momentum)
            except NumericsError as exc:
                where = _dump_diagnostics(run_dir, t + 1, {"loss": loss, "lr": lr, "error": str(exc)})
                raise NumericsError(f"{exc} at step {t + 1}; diagnostics in {where}") from exc
            step = t + 1
            row = {"step": step, "loss": loss, "lr": lr, "epoch": t // cfg.steps_per_epoch, "wall_time": round(time.perf_counter() - t0, 3)}
            epoch_end = step % cfg.steps_per_epoch == 0 or step == cfg.total_steps
            if epoch_end:
                pred = UNetPredictor(params, cfg.spec)
                vd = validation_dice(pred, val_recs, patch, cfg.plane_axis, cfg.val_overlap)
                row["val_dice"] = vd
                if best is None or vd > best:
                    best = vd
                    save(BEST, step)
            logf.write(json.dumps(row, sort_keys=True) + "\n")
            logf.flush()
            if echo is not None:
                echo(row)
            if epoch_end or step == end:
                save(LATEST, step)
    return run_dir


def read_log(run_dir) -> list:
    return _read_log(Path(run_dir) / "log.jsonl", 1 << 62)
