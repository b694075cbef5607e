"""Plan execution per case, with everything recorded to undo it later.

Order of operations is fixed: transpose -> crop to nonzero -> resample ->
normalize.  Inversion runs the geometric steps backwards.
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import imagecore
from .errors import DomainError, GeometryError, LeakageError, PlanFormatError, SegPipeError
from .imagecore import BBox, Volume
from .planner import Plan, plan_hash, serialize_plan, stable_seed
from .taskconv import PathGuard, atomic_write_text, canonical_json, guard_paths, list_cases, read_class_label

FG_SAMPLE_SIZE = 10_000
RECORD_FORMAT_VERSION = 1


class CaseError(SegPipeError):
    """A single case failed during dataset preprocessing."""

    def __init__(self, case_id: str, cause: Exception):
        super().__init__(f"case {case_id}: {cause}")
        self.case_id = case_id
        self.cause = cause


@dataclass(frozen=True)
class InversionMeta:
    original_shape: tuple
    original_spacing: tuple
    transpose: tuple
    bbox: BBox
    resampled_shape: tuple
    pad_spec: tuple
    plan_hash: str

    @property
    def preprocessed_shape(self) -> tuple:
        return tuple(n + b + a for n, (b, a) in zip(self.resampled_shape, self.pad_spec))

    @property
    def transposed_shape(self) -> tuple:
        return tuple(self.original_shape[o] for o in self.transpose)

    def forward_shape(self) -> tuple:
        """Re-derive the preprocessed grid shape by pushing a blank original grid through the steps."""
        blank = np.zeros(self.original_shape, dtype=np.uint8)
        t = imagecore.transpose_spatial(blank, self.transpose)
        c = t[self.bbox.slices]
        r = imagecore.resample_to_shape(c, self.resampled_shape, "nearest")
        return imagecore.pad_to(r, self.preprocessed_shape)[0].shape

    def to_dict(self) -> dict:
        return {
            "original_shape": list(self.original_shape),
            "original_spacing": list(self.original_spacing),
            "transpose": list(self.transpose),
            "bbox": {"start": list(self.bbox.start), "size": list(self.bbox.size)},
            "resampled_shape": list(self.resampled_shape),
            "pad_spec": [list(p) for p in self.pad_spec],
            "plan_hash": self.plan_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InversionMeta":
        return cls(
            original_shape=tuple(int(v) for v in d["original_shape"]),
            original_spacing=tuple(float(v) for v in d["original_spacing"]),
            transpose=tuple(int(v) for v in d["transpose"]),
            bbox=BBox(d["bbox"]["start"], d["bbox"]["size"]),
            resampled_shape=tuple(int(v) for v in d["resampled_shape"]),
            pad_spec=tuple(tuple(int(x) for x in p) for p in d["pad_spec"]),
            plan_hash=str(d["plan_hash"]),
        )


@dataclass
class CaseRecord:
    case_id: str
    image: np.ndarray
    meta: InversionMeta
    label: Optional[np.ndarray] = None
    fg_indices: Optional[np.ndarray] = None
    class_label: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return tuple(self.image.shape[1:])


# ------------------------------------------------------------ per case


def _normalize(data: np.ndarray, plan: Plan) -> np.ndarray:
    out = np.empty(data.shape, dtype=np.float32)
    for c, scheme in enumerate(plan.normalization):
        ch = data[c]
        if scheme == "none":
            out[c] = ch
        elif scheme == "zscore":
            out[c] = imagecore.zscore_normalize(ch)[0]
        elif scheme == "zscore_nonzero":
            mask = ch != 0
            out[c] = imagecore.zscore_normalize(ch, mask)[0] if mask.any() else 0.0
        else:
            stats = plan.fingerprint.intensity[c]
            clipped = np.clip(ch, stats.p00_5, stats.p99_5)
            out[c] = imagecore.zscore_normalize(clipped)[0]
    return out


def _run_plan(image: Volume, seg: Optional[np.ndarray], plan: Plan):
    if image.ndim != plan.ndim:
        raise PlanFormatError(f"plan is {plan.ndim}D but the image is {image.ndim}D")
    if image.channels != plan.fingerprint.channels:
        raise PlanFormatError(f"plan expects {plan.fingerprint.channels} channels, image has {image.channels}")
    if seg is not None and tuple(seg.shape) != image.shape:
        raise GeometryError(f"label shape {tuple(seg.shape)} does not match image shape {image.shape}")

    order = plan.transpose
    data = imagecore.transpose_spatial(image.data, order)
    spacing = tuple(image.spacing[o] for o in order)
    if seg is not None:
        seg = imagecore.transpose_spatial(seg, order)
    if plan.crop_to_nonzero:
        data, seg, box = imagecore.crop_to_nonzero(data, seg, spatial_ndim=image.ndim)
    else:
        box = BBox.full(data.shape[1:])
    if plan.target_spacing is not None:
        target = imagecore.resampled_shape(box.size, spacing, plan.target_spacing)
    else:
        target = tuple(plan.target_shape)
    data = imagecore.resample_to_shape(data, target, "linear")
    if seg is not None:
        seg = imagecore.resample_to_shape(seg, target, "nearest")
    data = _normalize(data, plan)
    meta = InversionMeta(
        original_shape=image.shape,
        original_spacing=image.spacing,
        transpose=tuple(order),
        bbox=box,
        resampled_shape=target,
        pad_spec=tuple((0, 0) for _ in target),
        plan_hash=plan_hash(plan),
    )
    return data, seg, meta


def foreground_sample(seg: np.ndarray, case_id: str, limit: int = FG_SAMPLE_SIZE) -> np.ndarray:
    idx = np.argwhere(seg > 0)
    if len(idx) > limit:
        rng = np.random.default_rng(stable_seed("fg", case_id))
        keep = np.sort(rng.choice(len(idx), size=limit, replace=False))
        idx = idx[keep]
    return idx.astype(np.int32)


def preprocess_case(image: Volume, seg: Optional[np.ndarray], plan: Plan, case_id: str = "case") -> CaseRecord:
    if seg is not None:
        seg = imagecore.as_label_map(seg)
    data, seg_out, meta = _run_plan(image, seg, plan)
    fg = foreground_sample(seg_out, case_id) if seg_out is not None else None
    return CaseRecord(case_id, data, meta, seg_out, fg)


def preprocess_case_for_inference(image: Volume, plan: Plan):
    data, _, meta = _run_plan(image, None, plan)
    return data, meta


def preprocess_classification_case(image: Volume, class_label: int, plan: Plan, case_id: str = "case") -> CaseRecord:
    if int(class_label) != class_label or class_label < 0:
        raise DomainError(f"class label must be a non-negative integer, got {class_label!r}")
    data, _, meta = _run_plan(image, None, plan)
    return CaseRecord(case_id, data, meta, class_label=int(class_label))


def invert_preprocessing(pred: np.ndarray, meta: InversionMeta) -> np.ndarray:
    """Map a preprocessed-grid prediction back onto the original grid.

    Integer arrays are treated as label maps ``[*spatial]`` (nearest
    resampling, background 0 outside the crop box).  Float arrays are class
    probabilities ``[class, *spatial]`` (linear resampling, background
    probability 1 outside the crop box).
    """
    pred = np.asarray(pred)
    is_label = np.issubdtype(pred.dtype, np.integer) or pred.dtype == bool
    spatial = tuple(pred.shape) if is_label else tuple(pred.shape[1:])
    if spatial != meta.preprocessed_shape:
        raise GeometryError(f"prediction grid {spatial} does not match preprocessed grid {meta.preprocessed_shape}")
    out = imagecore.unpad(pred, meta.pad_spec)
    out = imagecore.resample_to_shape(out, meta.bbox.size, "nearest" if is_label else "linear")
    tshape = meta.transposed_shape
    if tuple(meta.bbox.size) != tshape:
        if is_label:
            full = np.zeros(tshape, dtype=out.dtype)
            full[meta.bbox.slices] = out
        else:
            full = np.zeros((out.shape[0],) + tshape, dtype=out.dtype)
            full[0] = 1
            full[(slice(None),) + meta.bbox.slices] = out
        out = full
    return imagecore.transpose_spatial(out, imagecore.invert_order(meta.transpose))


# --------------------------------------------------------- on-disk records


def _write_record(out_dir: Path, rec: CaseRecord, extra: dict) -> int:
    sections = [("image", np.ascontiguousarray(rec.image, dtype="<f4"))]
    if rec.label is not None:
        sections.append(("label", np.ascontiguousarray(rec.label, dtype="<f4")))
    if rec.fg_indices is not None:
        sections.append(("fg_indices", np.ascontiguousarray(rec.fg_indices, dtype="<i4")))
    arrays, offset = {}, 0
    for name, arr in sections:
        arrays[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset}
        offset += arr.nbytes
    sidecar = {
        "format_version": RECORD_FORMAT_VERSION,
        "case_id": rec.case_id,
        "arrays": arrays,
        "inversion": rec.meta.to_dict(),
        "class_label": rec.class_label,
        **extra,
    }
    bin_path = out_dir / f"case_{rec.case_id}.bin"
    meta_path = out_dir / f"case_{rec.case_id}.meta.json"
    tmp_bin = bin_path.with_name(bin_path.name + ".tmp")
    try:
        with open(tmp_bin, "wb") as fh:
            for _, arr in sections:
                fh.write(arr.tobytes())
        os.replace(tmp_bin, bin_path)
        # sidecar last: its presence marks the record complete
        atomic_write_text(meta_path, canonical_json(sidecar))
    finally:
        if tmp_bin.exists():
            tmp_bin.unlink()
    return offset + meta_path.stat().st_size


def load_case(pre_dir, case_id: str) -> CaseRecord:
    pre_dir = Path(pre_dir)
    side = json.loads((pre_dir / f"case_{case_id}.meta.json").read_text(encoding="utf-8"))
    blob = (pre_dir / f"case_{case_id}.bin").read_bytes()
    arrays = {}
    for name, info in side["arrays"].items():
        dt = np.dtype(info["dtype"])
        n = int(np.prod(info["shape"])) if info["shape"] else 1
        arrays[name] = np.frombuffer(blob, dtype=dt, count=n, offset=info["offset"]).reshape(info["shape"])
    label = arrays.get("label")
    return CaseRecord(
        case_id=side["case_id"],
        image=arrays["image"],
        meta=InversionMeta.from_dict(side["inversion"]),
        label=None if label is None else label.astype(np.int64),
        fg_indices=arrays.get("fg_indices"),
        class_label=side.get("class_label"),
    )


def list_preprocessed(pre_dir) -> list:
    pre_dir = Path(pre_dir)
    suffix = ".meta.json"
    return sorted(
        p.name[len("case_"): -len(suffix)]
        for p in pre_dir.glob("case_*.meta.json")
        if (pre_dir / (p.name[: -len(suffix)] + ".bin")).is_file()
    )


def _source_hashes(case, guard: PathGuard) -> dict:
    files = list(case.images) + ([case.label] if case.label is not None else [])
    out = {}
    for p in files:
        with guard.open(p) as fh:
            out[p.name] = hashlib.sha256(fh.read()).hexdigest()
    return out


def _load_case_inputs(case, guard: PathGuard):
    vols = [guard.read_volume(p) for p in case.images]
    base = vols[0]
    for v in vols[1:]:
        if v.shape != base.shape:
            raise GeometryError(f"modality shapes differ: {v.shape} vs {base.shape}")
    image = Volume(np.concatenate([v.data for v in vols], axis=0), base.spacing, base.affine)
    return image


def _process_one(case, plan: Plan, out_dir: Path, guard: PathGuard, phash: str) -> tuple:
    side_path = out_dir / f"case_{case.case_id}.meta.json"
    try:
        hashes = _source_hashes(case, guard)
        if side_path.is_file() and (out_dir / f"case_{case.case_id}.bin").is_file():
            old = json.loads(side_path.read_text(encoding="utf-8"))
            if old.get("plan_hash") == phash and old.get("source_hashes") == hashes:
                return "skipped", (out_dir / f"case_{case.case_id}.bin").stat().st_size + side_path.stat().st_size
        image = _load_case_inputs(case, guard)
        if case.label is None:
            raise GeometryError("training case has no label")
        if case.label.suffix == ".txt":
            cls = read_class_label(case.label, guard.read_text(case.label))
            rec = preprocess_classification_case(image, cls, plan, case.case_id)
        else:
            seg = guard.read_volume(case.label)
            if seg.shape != image.shape:
                raise GeometryError(f"label shape {seg.shape} does not match image shape {image.shape}")
            rec = preprocess_case(image, seg.data[0], plan, case.case_id)
        nbytes = _write_record(out_dir, rec, {"plan_hash": phash, "source_hashes": hashes})
        return "processed", nbytes
    except LeakageError:
        raise
    except Exception as exc:
        raise CaseError(case.case_id, exc) from exc


def preprocess_dataset(task_dir, plan: Plan, out_dir, guard: Optional[PathGuard] = None, jobs: int = 1) -> dict:
    """Preprocess every training case of ``task_dir`` into ``out_dir``.

    Cases whose inputs and plan are unchanged since the last run are skipped.
    """
    task_dir = Path(task_dir)
    guard = guard or guard_paths("preprocess", task_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = list_cases(task_dir, "train", guard)
    phash = plan_hash(plan)

    plan_path = out_dir / "plan.json"
    plan_bytes = serialize_plan(plan)
    if not plan_path.is_file() or plan_path.read_bytes() != plan_bytes:
        atomic_write_text(plan_path, plan_bytes.decode("utf-8"))
    wanted = {c.case_id for c in cases}
    for stale in list_preprocessed(out_dir):
        if stale not in wanted:
            (out_dir / f"case_{stale}.bin").unlink(missing_ok=True)
            (out_dir / f"case_{stale}.meta.json").unlink(missing_ok=True)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(lambda c: _process_one(c, plan, out_dir, guard, phash), cases))
    processed = sum(1 for r in results if r[0] == "processed")
    return {
        "task": task_dir.name,
        "planner": plan.planner_name,
        "out_dir": str(out_dir),
        "cases": len(cases),
        "processed": processed,
        "skipped": len(cases) - processed,
        "up_to_date": processed == 0,
        "total_bytes": int(sum(r[1] for r in results)) + len(plan_bytes),
    }
