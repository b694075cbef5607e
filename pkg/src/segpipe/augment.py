"""Online augmentation with replayable random draws.

A draw is split in two: :func:`sample_transforms` decides which transforms
fire and with which magnitudes, producing a :class:`TransformPlanInstance`;
:func:`apply_transforms` executes an instance.  Any dense random field an
instance needs (elastic displacement, noise) is regenerated from the
instance seed, so an instance replays bit-for-bit.

All randomness comes from ``numpy.random.Philox`` keyed by a
``SeedSequence([seed, stream])``; stream ids are fixed per transform.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import DomainError, GeometryError
from .planner import stable_seed

# fixed Philox stream ids
_S_MIRROR, _S_ROT, _S_SCALE, _S_ELASTIC, _S_NOISE, _S_BLUR, _S_BIAS, _S_GAMMA = range(8)
_S_ELASTIC_FIELD, _S_NOISE_FIELD = 100, 101


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), stream])))


@dataclass(frozen=True)
class AugmentationConfig:
    p_mirror: float = 0.5
    p_rotation: float = 0.2
    rotation_deg: tuple = (-30.0, 30.0)
    p_scale: float = 0.2
    scale_range: tuple = (0.9, 1.1)
    p_elastic: float = 0.2
    elastic_sigma: tuple = (3.0, 6.0)
    elastic_smoothing: tuple = (6.0, 10.0)
    p_noise: float = 0.2
    noise_sigma: tuple = (0.0, 0.1)
    p_blur: float = 0.2
    blur_sigma: tuple = (0.5, 1.0)
    p_bias: float = 0.2
    bias_order: int = 3
    bias_amplitude: tuple = (0.0, 0.3)
    p_gamma: float = 0.2
    gamma_range: tuple = (0.7, 1.5)

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name.startswith("p_"):
                if not 0.0 <= value <= 1.0:
                    raise DomainError(f"{name} must lie in [0, 1], got {value}")
            elif isinstance(value, (tuple, list)):
                object.__setattr__(self, name, tuple(float(v) for v in value))
                lo, hi = value
                if lo > hi:
                    raise DomainError(f"{name} range is not ordered: {value}")
        if self.gamma_range[0] <= 0:
            raise DomainError("gamma range must be positive")
        if self.scale_range[0] <= 0:
            raise DomainError("scale range must be positive")
        for name in ("elastic_sigma", "elastic_smoothing", "noise_sigma", "blur_sigma", "bias_amplitude"):
            if getattr(self, name)[0] < 0:
                raise DomainError(f"{name} must be non-negative")
        if self.bias_order < 0:
            raise DomainError("bias_order must be >= 0")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(p_mirror=0, p_rotation=0, p_scale=0, p_elastic=0, p_noise=0, p_blur=0, p_bias=0, p_gamma=0)


def default_pipeline() -> AugmentationConfig:
    return AugmentationConfig()


@dataclass(frozen=True)
class TransformPlanInstance:
    seed: int
    ndim: int
    mirror_axes: tuple = ()
    rotation_deg: Optional[tuple] = None
    scale: Optional[float] = None
    elastic: Optional[tuple] = None  # (displacement sigma, smoothing sigma)
    noise_sigma: Optional[float] = None
    blur_sigma: Optional[float] = None
    bias: Optional[tuple] = None  # (amplitude, polynomial order, coefficients)
    gamma: Optional[float] = None

    @property
    def is_identity(self) -> bool:
        return not self.mirror_axes and all(
            getattr(self, f) is None
            for f in ("rotation_deg", "scale", "elastic", "noise_sigma", "blur_sigma", "bias", "gamma")
        )

    @property
    def has_resample(self) -> bool:
        return self.rotation_deg is not None or self.scale is not None or self.elastic is not None


def _monomials(ndim: int, order: int) -> list:
    return [e for e in itertools.product(range(order + 1), repeat=ndim) if sum(e) <= order]


def _uniform(rng, bounds) -> float:
    return float(rng.uniform(bounds[0], bounds[1])) if bounds[1] > bounds[0] else float(bounds[0])


def sample_transforms(cfg: AugmentationConfig, rng_seed: int, ndim: int = 3) -> TransformPlanInstance:
    """Draw one concrete transform set; each transform fires independently."""
    if ndim not in (2, 3):
        raise DomainError("ndim must be 2 or 3")
    seed = int(rng_seed)
    fields = {}

    r = _rng(seed, _S_MIRROR)
    fields["mirror_axes"] = tuple(a for a in range(ndim) if r.random() < cfg.p_mirror)
    r = _rng(seed, _S_ROT)
    if r.random() < cfg.p_rotation:
        planes = 1 if ndim == 2 else 3
        fields["rotation_deg"] = tuple(_uniform(r, cfg.rotation_deg) for _ in range(planes))
    r = _rng(seed, _S_SCALE)
    if r.random() < cfg.p_scale:
        fields["scale"] = _uniform(r, cfg.scale_range)
    r = _rng(seed, _S_ELASTIC)
    if r.random() < cfg.p_elastic:
        fields["elastic"] = (_uniform(r, cfg.elastic_sigma), _uniform(r, cfg.elastic_smoothing))
    r = _rng(seed, _S_NOISE)
    if r.random() < cfg.p_noise:
        fields["noise_sigma"] = _uniform(r, cfg.noise_sigma)
    r = _rng(seed, _S_BLUR)
    if r.random() < cfg.p_blur:
        fields["blur_sigma"] = _uniform(r, cfg.blur_sigma)
    r = _rng(seed, _S_BIAS)
    if r.random() < cfg.p_bias:
        amp = _uniform(r, cfg.bias_amplitude)
        coeffs = tuple(float(c) for c in r.uniform(-1.0, 1.0, len(_monomials(ndim, cfg.bias_order))))
        fields["bias"] = (amp, cfg.bias_order, coeffs)
    r = _rng(seed, _S_GAMMA)
    if r.random() < cfg.p_gamma:
        fields["gamma"] = _uniform(r, cfg.gamma_range)
    return TransformPlanInstance(seed=seed, ndim=ndim, **fields)


def item_seed(global_seed: int, epoch: int, batch_index: int, item_index: int) -> int:
    """Seed of one batch item; independent of the order in which items are produced."""
    return stable_seed("augment", global_seed, epoch, batch_index, item_index)


# ------------------------------------------------------------------- apply


def _snap(v: float) -> float:
    # exact zeros/ones for multiples of 90 degrees
    r = round(v)
    return float(r) if abs(v - r) < 1e-12 else v


def rotation_matrix(angles_deg, ndim: int) -> np.ndarray:
    """Forward rotation applied to image content.

    In 3D, ``angles_deg[a]`` rotates about axis ``a`` within the plane of the
    remaining two axes (taken in increasing order); the three rotations are
    composed as ``R0 @ R1 @ R2``.
    """
    R = np.eye(ndim)
    planes = [(0, 1)] if ndim == 2 else [(1, 2), (0, 2), (0, 1)]
    for ang, (i, j) in zip(angles_deg, planes):
        t = math.radians(ang)
        c, s = _snap(math.cos(t)), _snap(math.sin(t))
        Q = np.eye(ndim)
        Q[i, i], Q[i, j], Q[j, i], Q[j, j] = c, -s, s, c
        R = R @ Q
    return R


def _source_coords(shape, inst: TransformPlanInstance) -> np.ndarray:
    nd = len(shape)
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    grid = np.indices(shape, dtype=np.float64).reshape(nd, -1)
    d = grid - center[:, None]
    M = np.eye(nd)
    if inst.scale is not None:
        M = M * inst.scale
    if inst.rotation_deg is not None:
        M = rotation_matrix(inst.rotation_deg, nd) @ M
    # output(x) = input(M^-1 (x - c) + c)
    src = np.linalg.solve(M, d) if (inst.scale is not None or inst.rotation_deg is not None) else d
    src = np.where(np.abs(src - np.rint(src)) < 1e-9, np.rint(src), src) if inst.elastic is None else src
    src = src + center[:, None]
    if inst.elastic is not None:
        sigma, smooth = inst.elastic
        rng = _rng(inst.seed, _S_ELASTIC_FIELD)
        for a in range(nd):
            field = ndimage.gaussian_filter(rng.standard_normal(shape), smooth, mode="reflect")
            sd = field.std()
            if sd > 0:
                src[a] += (field / sd * sigma).ravel()
    return src.reshape((nd,) + tuple(shape))


def _bias_field(shape, amp: float, order: int, coeffs) -> np.ndarray:
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    poly = np.zeros(shape)
    for c, e in zip(coeffs, _monomials(len(shape), order)):
        term = np.ones(shape)
        for m, k in zip(mesh, e):
            if k:
                term = term * m ** k
        poly += c * term
    peak = np.abs(poly).max()
    if peak > 0:
        poly /= peak
    return 1.0 + amp * poly


def apply_transforms(image: np.ndarray, seg: Optional[np.ndarray], inst: TransformPlanInstance):
    """Apply ``inst`` to ``image [C, *spatial]`` and optional ``seg [*spatial]``."""
    image = np.asarray(image)
    shape = tuple(image.shape[1:])
    if len(shape) != inst.ndim:
        raise GeometryError(f"instance is {inst.ndim}D but image has spatial shape {shape}")
    if seg is not None and tuple(np.shape(seg)) != shape:
        raise GeometryError(f"seg shape {np.shape(seg)} does not match image spatial shape {shape}")
    if inst.is_identity:
        return image, seg

    img = image
    if inst.mirror_axes:
        img = np.flip(img, axis=tuple(a + 1 for a in inst.mirror_axes))
        if seg is not None:
            seg = np.flip(seg, axis=inst.mirror_axes)
    if inst.has_resample:
        coords = _source_coords(shape, inst)
        img = np.stack(
            [ndimage.map_coordinates(ch, coords, order=1, mode="nearest", output=image.dtype) for ch in img]
        )
        if seg is not None:
            seg = ndimage.map_coordinates(np.asarray(seg), coords, order=0, mode="nearest")
    img = np.array(img, dtype=np.result_type(image.dtype, np.float32))

    if inst.noise_sigma is not None and inst.noise_sigma > 0:
        noise = _rng(inst.seed, _S_NOISE_FIELD).standard_normal(img.shape) * inst.noise_sigma
        img = (img + noise).astype(img.dtype)
    if inst.blur_sigma is not None and inst.blur_sigma > 0:
        img = np.stack([ndimage.gaussian_filter(ch, inst.blur_sigma, mode="nearest") for ch in img])
    if inst.bias is not None:
        amp, order, coeffs = inst.bias
        img = (img * _bias_field(shape, amp, order, coeffs)).astype(img.dtype)
    if inst.gamma is not None and inst.gamma != 1.0:
        out = np.empty_like(img)
        for c, ch in enumerate(img):
            lo, hi = float(ch.min()), float(ch.max())
            if hi > lo:
                out[c] = ((ch - lo) / (hi - lo)) ** inst.gamma * (hi - lo) + lo
            else:
                out[c] = ch
        img = out
    if seg is not None:
        seg = np.ascontiguousarray(seg)
    return np.ascontiguousarray(img), seg
