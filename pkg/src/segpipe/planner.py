"""Dataset fingerprinting and plan construction."""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import imagecore
from .errors import (
    EmptyDataset,
    InconsistentDataset,
    PlanFormatError,
    VersionError,
)
from .taskconv import PathGuard, atomic_write_text, guard_paths, list_cases, read_class_label

PLAN_FORMAT_VERSION = 1
DEFAULT_SAMPLE_SIZE = 100_000
PERCENTILES = (0.5, 50.0, 99.5)
NORMALIZATIONS = ("zscore", "zscore_nonzero", "clip_percentiles_then_zscore", "none")


def stable_seed(*parts) -> int:
    """63-bit seed derived from arbitrary printable parts, stable across platforms."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class ChannelStats:
    mean: float
    std: float
    p00_5: float
    p50: float
    p99_5: float

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "p00_5": self.p00_5, "p50": self.p50, "p99_5": self.p99_5}


@dataclass(frozen=True)
class Fingerprint:
    case_ids: tuple
    shapes: tuple
    spacings: tuple
    channels: int
    labels: tuple
    intensity: tuple
    content_hash: str
    sample_size: int = DEFAULT_SAMPLE_SIZE
    seed: int = 0

    @property
    def case_count(self) -> int:
        return len(self.case_ids)

    @property
    def ndim(self) -> int:
        return len(self.shapes[0])

    def median_spacing(self) -> tuple:
        return tuple(float(v) for v in np.median(np.asarray(self.spacings, dtype=np.float64), axis=0))

    def max_shape(self) -> tuple:
        return tuple(int(v) for v in np.max(np.asarray(self.shapes), axis=0))

    def to_dict(self) -> dict:
        return {
            "case_ids": list(self.case_ids),
            "shapes": [list(s) for s in self.shapes],
            "spacings": [list(s) for s in self.spacings],
            "channels": self.channels,
            "labels": list(self.labels),
            "intensity": [c.to_dict() for c in self.intensity],
            "content_hash": self.content_hash,
            "sample_size": self.sample_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Fingerprint":
        return cls(
            case_ids=tuple(str(c) for c in d["case_ids"]),
            shapes=tuple(tuple(int(v) for v in s) for s in d["shapes"]),
            spacings=tuple(tuple(float(v) for v in s) for s in d["spacings"]),
            channels=int(d["channels"]),
            labels=tuple(int(v) for v in d["labels"]),
            intensity=tuple(ChannelStats(**{k: float(v) for k, v in c.items()}) for c in d["intensity"]),
            content_hash=str(d["content_hash"]),
            sample_size=int(d["sample_size"]),
            seed=int(d["seed"]),
        )


def _scan_case(case, guard: PathGuard, sample_size: int, seed: int):
    vols = [guard.read_volume(p) for p in case.images]
    shape, spacing = vols[0].shape, vols[0].spacing
    for v in vols[1:]:
        if v.shape != shape:
            raise InconsistentDataset(f"case {case.case_id}: modality shapes differ")
    data = np.concatenate([v.data for v in vols], axis=0)
    flat = data.reshape(data.shape[0], -1)
    n = flat.shape[1]
    rng = np.random.default_rng(stable_seed(seed, case.case_id))
    if n > sample_size:
        idx = np.sort(rng.choice(n, size=sample_size, replace=False))
        samples = flat[:, idx]
    else:
        samples = flat
    labels = {0}
    if case.label is not None:
        if case.label.suffix == ".txt":
            labels.add(read_class_label(case.label, guard.read_text(case.label)))
        else:
            lbl = imagecore.as_label_map(guard.read_volume(case.label).data[0])
            labels.update(int(v) for v in np.unique(lbl))
    hashes = [(p.relative_to(guard.root).as_posix(), guard.payload_sha256(p)) for p in case.images]
    if case.label is not None:
        hashes.append((case.label.relative_to(guard.root).as_posix(), guard.payload_sha256(case.label)))
    return shape, spacing, data.shape[0], samples.astype(np.float64), labels, hashes


def fingerprint_dataset(
    task_dir,
    sample_size: int = DEFAULT_SAMPLE_SIZE,
    seed: int = 0,
    guard: Optional[PathGuard] = None,
    jobs: int = 1,
) -> Fingerprint:
    """Summarize the training partition of a task.

    Intensity statistics are pooled over a seeded subsample of at most
    ``sample_size`` voxels per case.  Cases are reduced in sorted-id order,
    so the result does not depend on ``jobs``.
    """
    guard = guard or guard_paths("preprocess", task_dir)
    cases = list_cases(Path(task_dir), "train", guard)
    if not cases:
        raise EmptyDataset(f"{task_dir}: no training cases")
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        scanned = list(pool.map(lambda c: _scan_case(c, guard, sample_size, seed), cases))

    channels = {s[2] for s in scanned}
    if len(channels) != 1:
        raise InconsistentDataset(f"{task_dir}: channel counts differ across cases: {sorted(channels)}")
    ndims = {len(s[0]) for s in scanned}
    if len(ndims) != 1:
        raise InconsistentDataset(f"{task_dir}: mixed 2D and 3D cases")
    n_ch = channels.pop()
    pooled = np.concatenate([s[3] for s in scanned], axis=1)
    stats = []
    for c in range(n_ch):
        vals = pooled[c]
        p = np.percentile(vals, PERCENTILES)
        stats.append(
            ChannelStats(float(vals.mean()), float(vals.std()), float(p[0]), float(p[1]), float(p[2]))
        )
    labels = set()
    h = hashlib.sha256()
    for s in scanned:
        labels |= s[4]
        for rel, digest in s[5]:
            h.update(f"{rel}\0{digest}\n".encode())
    return Fingerprint(
        case_ids=tuple(c.case_id for c in cases),
        shapes=tuple(tuple(s[0]) for s in scanned),
        spacings=tuple(tuple(s[1]) for s in scanned),
        channels=n_ch,
        labels=tuple(sorted(labels)),
        intensity=tuple(stats),
        content_hash=h.hexdigest(),
        sample_size=sample_size,
        seed=seed,
    )


# ------------------------------------------------------------------- plans


@dataclass(frozen=True)
class Plan:
    planner_name: str
    fingerprint: Fingerprint
    normalization: tuple
    target_spacing: Optional[tuple] = None
    target_shape: Optional[tuple] = None
    transpose: tuple = ()
    crop_to_nonzero: bool = True
    format_version: int = PLAN_FORMAT_VERSION

    def __post_init__(self):
        if (self.target_spacing is None) == (self.target_shape is None):
            raise PlanFormatError("exactly one of target_spacing / target_shape must be set")
        if not self.transpose:
            object.__setattr__(self, "transpose", tuple(range(self.fingerprint.ndim)))
        if sorted(self.transpose) != list(range(self.fingerprint.ndim)):
            raise PlanFormatError(f"transpose {self.transpose} is not a permutation of the spatial axes")
        if len(self.normalization) != self.fingerprint.channels:
            raise PlanFormatError("need one normalization scheme per channel")
        for n in self.normalization:
            if n not in NORMALIZATIONS:
                raise PlanFormatError(f"unknown normalization {n!r}")
        target = self.target_spacing if self.target_spacing is not None else self.target_shape
        if len(target) != self.fingerprint.ndim:
            raise PlanFormatError("target rank does not match dataset dimensionality")

    @property
    def ndim(self) -> int:
        return self.fingerprint.ndim

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "planner_name": self.planner_name,
            "target_spacing": None if self.target_spacing is None else [float(v) for v in self.target_spacing],
            "target_shape": None if self.target_shape is None else [int(v) for v in self.target_shape],
            "transpose": list(self.transpose),
            "crop_to_nonzero": bool(self.crop_to_nonzero),
            "normalization": list(self.normalization),
            "fingerprint": self.fingerprint.to_dict(),
        }


def make_plan_default(fp: Fingerprint) -> Plan:
    """Resample to the per-axis median spacing, crop to nonzero, clip+z-score."""
    return Plan(
        planner_name="default",
        fingerprint=fp,
        normalization=("clip_percentiles_then_zscore",) * fp.channels,
        target_spacing=fp.median_spacing(),
        crop_to_nonzero=True,
    )


def make_plan_maxsize(fp: Fingerprint) -> Plan:
    """Resample every case to the element-wise largest training shape."""
    return Plan(
        planner_name="maxsize",
        fingerprint=fp,
        normalization=("clip_percentiles_then_zscore",) * fp.channels,
        target_shape=fp.max_shape(),
        crop_to_nonzero=False,
    )


PLANNERS = {"default": make_plan_default, "maxsize": make_plan_maxsize}


def serialize_plan(p: Plan) -> bytes:
    return (json.dumps(p.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


_PLAN_KEYS = {
    "format_version",
    "planner_name",
    "target_spacing",
    "target_shape",
    "transpose",
    "crop_to_nonzero",
    "normalization",
    "fingerprint",
}


def parse_plan(raw) -> Plan:
    if isinstance(raw, (bytes, bytearray)):
        raw = raw.decode("utf-8")
    try:
        d = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise PlanFormatError(f"plan is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise PlanFormatError("plan must be a JSON object")
    version = d.get("format_version")
    if version != PLAN_FORMAT_VERSION:
        raise VersionError(f"unsupported plan format_version {version!r} (expected {PLAN_FORMAT_VERSION})")
    if set(d) != _PLAN_KEYS:
        raise PlanFormatError(f"plan keys {sorted(d)} do not match schema {sorted(_PLAN_KEYS)}")
    try:
        fp = Fingerprint.from_dict(d["fingerprint"])
        spacing = d["target_spacing"]
        shape = d["target_shape"]
        if not isinstance(d["crop_to_nonzero"], bool):
            raise PlanFormatError("crop_to_nonzero must be a boolean")
        return Plan(
            planner_name=str(d["planner_name"]),
            fingerprint=fp,
            normalization=tuple(d["normalization"]),
            target_spacing=None if spacing is None else tuple(float(v) for v in spacing),
            target_shape=None if shape is None else tuple(int(v) for v in shape),
            transpose=tuple(int(v) for v in d["transpose"]),
            crop_to_nonzero=d["crop_to_nonzero"],
            format_version=int(version),
        )
    except PlanFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise PlanFormatError(f"plan does not match schema: {exc}") from exc


def plan_hash(p: Plan) -> str:
    return hashlib.sha256(serialize_plan(p)).hexdigest()


def write_plan(p: Plan, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, serialize_plan(p).decode("utf-8"))
    return path


def read_plan(path) -> Plan:
    return parse_plan(Path(path).read_bytes())


def identity_plan(fp: Fingerprint, spacing) -> Plan:
    """A plan that leaves a case with ``spacing`` untouched (useful for debugging and tests)."""
    return Plan(
        planner_name="identity",
        fingerprint=fp,
        normalization=("none",) * fp.channels,
        target_spacing=tuple(float(s) for s in spacing),
        crop_to_nonzero=False,
    )


__all__ = [
    "ChannelStats",
    "Fingerprint",
    "Plan",
    "PLANNERS",
    "fingerprint_dataset",
    "identity_plan",
    "make_plan_default",
    "make_plan_maxsize",
    "parse_plan",
    "plan_hash",
    "read_plan",
    "serialize_plan",
    "stable_seed",
    "write_plan",
]
