"""Sliding-window and plane-wise prediction, ensembling, and write-back.

Windows are softmaxed before fusion, so the fused map is a convex
combination of per-window probabilities.  Accumulation is float64; the
finalized map is float32.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import imagecore
from .errors import DomainError, PlanMismatch, ShapeError
from .model import Checkpoint, UNetPredictor, load_checkpoint, softmax
from .planner import Plan, plan_hash
from .preprocess import invert_preprocessing, preprocess_case_for_inference
from .taskconv import atomic_write_text, canonical_json

log = logging.getLogger(__name__)

DEFAULT_OVERLAP = 0.5


@dataclass(frozen=True)
class TileScheme:
    shape: tuple
    patch: tuple
    overlap: float
    origins: tuple

    @property
    def steps(self) -> tuple:
        return tuple(tile_step(p, self.overlap) for p in self.patch)


def tile_step(patch: int, overlap: float) -> int:
    return max(1, math.ceil(patch * (1.0 - overlap)))


def _axis_origins(n: int, p: int, step: int) -> list:
    if p >= n:
        return [0]
    out = list(range(0, n - p + 1, step))
    if out[-1] != n - p:
        out.append(n - p)  # flush against the border
    return out


def tile_scheme(shape, patch, overlap: float = DEFAULT_OVERLAP) -> TileScheme:
    shape, patch = tuple(int(s) for s in shape), tuple(int(p) for p in patch)
    if len(shape) != len(patch):
        raise ShapeError(f"patch {patch} and volume {shape} differ in rank")
    if not 0.0 <= overlap < 1.0:
        raise DomainError(f"overlap must lie in [0, 1), got {overlap}")
    per_axis = [_axis_origins(n, p, tile_step(p, overlap)) for n, p in zip(shape, patch)]
    grids = np.meshgrid(*[np.asarray(a) for a in per_axis], indexing="ij")
    origins = tuple(tuple(int(v) for v in o) for o in zip(*[g.ravel() for g in grids]))
    return TileScheme(shape, patch, float(overlap), origins)


def _predictor_logits(predictor, patch: np.ndarray) -> np.ndarray:
    fn = getattr(predictor, "predict_logits", predictor)
    return np.asarray(fn(patch))


def sliding_window_predict(
    predictor,
    volume: np.ndarray,
    patch,
    overlap: float = DEFAULT_OVERLAP,
    use_gaussian: bool = True,
    sigma_scale: float = imagecore.DEFAULT_SIGMA_SCALE,
) -> np.ndarray:
    """Class probabilities ``[K, *spatial]`` for ``volume [C, *spatial]``."""
    volume = np.asarray(volume)
    spatial = tuple(volume.shape[1:])
    patch = tuple(int(p) for p in patch)
    if len(patch) != len(spatial):
        raise ShapeError(f"patch {patch} does not match volume spatial rank {len(spatial)}")
    dim = getattr(predictor, "dim", None)
    if dim is not None and dim != len(spatial):
        raise ShapeError(f"{dim}D predictor applied to a {len(spatial)}D volume")
    padded_shape = tuple(max(n, p) for n, p in zip(spatial, patch))
    padded, pad_spec = imagecore.pad_to(volume, padded_shape)
    scheme = tile_scheme(padded_shape, patch, overlap)
    if use_gaussian:
        weight = imagecore.gaussian_weight_map(patch, sigma_scale).astype(np.float64)
    else:
        weight = np.ones(patch)

    acc = None
    wsum = np.zeros(padded_shape)
    for origin in scheme.origins:
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
        logits = _predictor_logits(predictor, padded[(slice(None),) + sl])
        if logits.ndim != len(patch) + 1 or tuple(logits.shape[1:]) != patch:
            raise ShapeError(f"predictor returned {logits.shape} for a patch of {patch}")
        probs = softmax(logits, axis=0).astype(np.float32)
        if acc is None:
            acc = np.zeros((probs.shape[0],) + padded_shape)
        acc[(slice(None),) + sl] += weight * probs
        wsum[sl] += weight
    out = (acc / wsum).astype(np.float32)
    return imagecore.unpad(out, pad_spec)


def predict_plane_stack(
    predictor2d,
    volume3d: np.ndarray,
    axis: int,
    patch=None,
    overlap: float = DEFAULT_OVERLAP,
    use_gaussian: bool = True,
) -> np.ndarray:
    """Slice ``volume3d [C, X, Y, Z]`` along spatial ``axis``, predict each slice in 2D, restack."""
    if axis not in (0, 1, 2):
        raise DomainError(f"plane axis must be 0, 1 or 2, got {axis}")
    volume3d = np.asarray(volume3d)
    if volume3d.ndim != 4:
        raise ShapeError(f"expected [C, X, Y, Z], got {volume3d.shape}")
    dim = getattr(predictor2d, "dim", 2)
    if dim != 2:
        raise ShapeError("plane-wise prediction needs a 2D predictor")
    plane = tuple(n for a, n in enumerate(volume3d.shape[1:]) if a != axis)
    if patch is None:
        div = getattr(predictor2d, "divisor", 1)
        patch = tuple(-(-n // div) * div for n in plane)
    slices = [
        sliding_window_predict(predictor2d, np.take(volume3d, i, axis=axis + 1), patch, overlap, use_gaussian)
        for i in range(volume3d.shape[axis + 1])
    ]
    return np.stack(slices, axis=axis + 1)


def ensemble_probabilities(members: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise mean of class-probability maps."""
    members = list(members)
    if not members:
        raise DomainError("ensemble needs at least one member")
    shape = np.shape(members[0])
    for m in members[1:]:
        if np.shape(m) != shape:
            raise ShapeError(f"ensemble members disagree in shape: {np.shape(m)} vs {shape}")
    if len(members) == 1:
        return np.array(members[0], copy=True)
    acc = np.zeros(shape)
    for m in members:
        acc += m
    return (acc / len(members)).astype(np.result_type(*[np.asarray(m).dtype for m in members]))


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lower class
    return np.argmax(probs, axis=0)


# ------------------------------------------------------------- full cases


@dataclass
class Member:
    """One trained model taking part in a prediction."""

    checkpoint: Checkpoint
    plane_axis: Optional[int]
    patch: tuple
    plan_hash: Optional[str]

    @classmethod
    def from_checkpoint(cls, ckpt) -> "Member":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        extra = ckpt.extra
        axis = extra.get("plane_axis")
        patch = tuple(extra.get("patch_size") or ())
        return cls(ckpt, None if axis is None else int(axis), patch, extra.get("plan_hash"))

    def predictor(self) -> UNetPredictor:
        return UNetPredictor(self.checkpoint.params, self.checkpoint.spec)

    def predict(self, volume: np.ndarray, overlap: float, use_gaussian: bool) -> np.ndarray:
        pred = self.predictor()
        div = pred.divisor
        if self.plane_axis is not None:
            patch = self.patch or None
            return predict_plane_stack(pred, volume, self.plane_axis, patch, overlap, use_gaussian)
        spatial = volume.shape[1:]
        patch = self.patch or tuple(-(-n // div) * div for n in spatial)
        return sliding_window_predict(pred, volume, patch, overlap, use_gaussian)


def _match_plan(member: Member, plans: dict, allow_mismatch: bool) -> str:
    if member.plan_hash in plans:
        return member.plan_hash
    if not allow_mismatch:
        raise PlanMismatch(
            f"checkpoint was trained with plan {member.plan_hash}, none of the supplied plans match"
        )
    fallback = next(iter(plans))
    log.warning("plan hash mismatch overridden: using plan %s for checkpoint trained on %s", fallback, member.plan_hash)
    return fallback


def predict_case(
    checkpoints,
    image,
    plan,
    overlap: float = DEFAULT_OVERLAP,
    use_gaussian: bool = True,
    out_path=None,
    allow_plan_mismatch: bool = False,
    case_id: Optional[str] = None,
):
    """Predict a label map on the original grid of ``image``.

    ``checkpoints`` is one checkpoint (path or loaded) or a list of them; more
    than one implies ensembling.  ``plan`` is a :class:`Plan` or a list of
    plans; each checkpoint is matched to a plan by hash.  Members sharing a
    plan are averaged in preprocessed space, groups are averaged on the
    original grid.  Returns ``(labels, meta)``.
    """
    if isinstance(checkpoints, (str, Path, Checkpoint)):
        checkpoints = [checkpoints]
    members = [Member.from_checkpoint(c) for c in checkpoints]
    if not members:
        raise DomainError("need at least one checkpoint")
    plans = [plan] if isinstance(plan, Plan) else list(plan)
    by_hash = {plan_hash(p): p for p in plans}

    volume = image if isinstance(image, imagecore.Volume) else imagecore.read_volume(image)
    groups: dict = {}
    for m in members:
        groups.setdefault(_match_plan(m, by_hash, allow_plan_mismatch), []).append(m)

    inverted = []
    for h, group in groups.items():
        data, meta = preprocess_case_for_inference(volume, by_hash[h])
        probs = ensemble_probabilities([m.predict(data, overlap, use_gaussian) for m in group])
        inverted.append(invert_preprocessing(probs, meta))
    probs = ensemble_probabilities(inverted)
    labels = argmax_labels(probs)

    meta = {
        "case_id": case_id,
        "checkpoints": [m.checkpoint.sha256 for m in members],
        "plan_hashes": sorted(groups),
        "options": {
            "overlap": overlap,
            "gaussian": bool(use_gaussian),
            "planes": [m.plane_axis for m in members],
            "allow_plan_mismatch": bool(allow_plan_mismatch),
        },
        "shape": list(labels.shape),
    }
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        dtype = "uint8" if probs.shape[0] <= 256 else "int16"
        imagecore.write_volume(imagecore.Volume(labels[None], volume.spacing, volume.affine), out_path, dtype)
        name = out_path.name[: -len(".nii.gz")] if out_path.name.endswith(".nii.gz") else out_path.stem
        atomic_write_text(out_path.with_name(name + ".prediction_meta.json"), canonical_json(meta))
    return labels, meta


def predict_folder(checkpoints, image_dir, plan, out_dir, overlap=DEFAULT_OVERLAP, use_gaussian=True, allow_plan_mismatch=False) -> list:
    """Predict every ``case_<id>_0000.nii.gz`` (plus further modalities) in ``image_dir``."""
    from .taskconv import IMAGE_RE

    image_dir, out_dir = Path(image_dir), Path(out_dir)
    cases: dict = {}
    for p in sorted(image_dir.iterdir()):
        m = IMAGE_RE.match(p.name)
        if m:
            cases.setdefault(m["id"], {})[int(m["mod"])] = p
    if isinstance(checkpoints, (str, Path, Checkpoint)):
        checkpoints = [checkpoints]
    loaded = [c if isinstance(c, Checkpoint) else load_checkpoint(c) for c in checkpoints]
    done = []
    for cid, mods in sorted(cases.items()):
        vols = [imagecore.read_volume(mods[k]) for k in sorted(mods)]
        vol = imagecore.Volume(np.concatenate([v.data for v in vols]), vols[0].spacing, vols[0].affine)
        out = out_dir / f"case_{cid}.nii.gz"
        predict_case(loaded, vol, plan, overlap, use_gaussian, out, allow_plan_mismatch, case_id=cid)
        done.append(cid)
    return done

