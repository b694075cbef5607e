"""Stateless image building blocks.

Everything in here is a pure function of its arguments.  Arrays follow one
convention throughout: spatial axes are the *trailing* axes, and anything in
front of them (usually a channel axis) is carried along untouched.  The
number of spatial axes is taken from the companion argument (a spacing, a
target shape, an order) or from ``spatial_ndim`` where no such argument
exists.
"""
from __future__ import annotations

import gzip
import hashlib
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import nibabel as nib
import numpy as np
from nibabel.orientations import apply_orientation, axcodes2ornt, io_orientation, ornt_transform

from .errors import DomainError, IoError, ParseError, RangeError, UnsupportedFormat

# NIfTI datatype codes accepted on read / write
_NIFTI_CODES = {2: np.uint8, 4: np.int16, 16: np.float32}
WRITE_DTYPES = {"float32": np.float32, "uint8": np.uint8, "int16": np.int16}
_RAS = axcodes2ornt(("R", "A", "S"))

NORM_EPS = 1e-8
DEFAULT_SIGMA_SCALE = 1.0 / 8.0


@dataclass
class Volume:
    """Image array ``[channel, *spatial]`` with voxel spacing and the source affine.

    ``data`` is in canonical (closest-to-RAS) axis order; ``affine`` is the
    untouched voxel-to-world transform of the file it came from, so that
    :func:`write_volume` can put the data back the way it was found.
    """

    data: np.ndarray
    spacing: tuple
    affine: Optional[np.ndarray] = None

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) not in (2, 3):
            raise DomainError(f"volumes have 2 or 3 spatial axes, got spacing {self.spacing}")
        if not all(math.isfinite(s) and s > 0 for s in self.spacing):
            raise DomainError(f"spacing must be positive and finite: {self.spacing}")
        if self.data.ndim != len(self.spacing) + 1:
            raise DomainError(
                f"data must be [channel, *spatial] with {len(self.spacing)} spatial axes, got shape {self.data.shape}"
            )
        if self.affine is None:
            aff = np.eye(4)
            for i, s in enumerate(self.spacing):
                aff[i, i] = s
            self.affine = aff
        self.affine = np.asarray(self.affine, dtype=np.float64)

    @property
    def ndim(self) -> int:
        return len(self.spacing)

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape[1:])

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class BBox:
    start: tuple
    size: tuple

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(int(s) for s in self.start))
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))

    @property
    def slices(self) -> tuple:
        return tuple(slice(a, a + n) for a, n in zip(self.start, self.size))

    @classmethod
    def full(cls, shape) -> "BBox":
        return cls((0,) * len(shape), tuple(shape))

    def fits(self, shape) -> bool:
        return all(a >= 0 and n >= 1 and a + n <= d for a, n, d in zip(self.start, self.size, shape))


# --------------------------------------------------------------------- I/O


def _is_gz(path: Path) -> bool:
    return path.name.endswith(".gz")


def read_volume(path) -> Volume:
    """Load a NIfTI-1 file as a float32 :class:`Volume` in closest-to-RAS order."""
    path = Path(path)
    if not path.is_file():
        raise IoError(f"no such file: {path}")
    try:
        img = nib.load(str(path))
    except FileNotFoundError as exc:
        raise IoError(str(exc)) from exc
    except Exception as exc:  # nibabel raises a zoo of types for bad headers
        raise ParseError(f"{path}: unreadable NIfTI header ({exc})") from exc
    if type(img) is not nib.Nifti1Image:
        raise UnsupportedFormat(f"{path}: only NIfTI-1 is supported, got {type(img).__name__}")
    code = int(img.header["datatype"])
    if code not in _NIFTI_CODES:
        raise UnsupportedFormat(f"{path}: unsupported NIfTI datatype code {code}")
    try:
        raw = np.asarray(img.dataobj)
    except Exception as exc:
        raise ParseError(f"{path}: truncated or corrupt image data ({exc})") from exc

    data = raw.astype(np.float32, copy=False)
    if not np.isfinite(data).all():
        raise ParseError(f"{path}: image contains NaN or Inf")
    zooms = [float(z) for z in img.header.get_zooms()]
    affine = np.asarray(img.affine, dtype=np.float64)

    if data.ndim == 2:
        spatial = 2
    elif data.ndim in (3, 4):
        spatial = 3
    else:
        raise UnsupportedFormat(f"{path}: {data.ndim}-dimensional data is not supported")
    spacing = zooms[:spatial]
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise ParseError(f"{path}: invalid voxel sizes {spacing}")

    if spatial == 3:
        ornt = io_orientation(affine)
        data = apply_orientation(data, ornt)
        canon = [0.0] * 3
        for i in range(3):
            canon[int(ornt[i, 0])] = spacing[i]
        spacing = canon
    if data.ndim == spatial:
        data = data[None]
    else:
        data = np.moveaxis(data, -1, 0)
    return Volume(np.ascontiguousarray(data, dtype=np.float32), tuple(spacing), affine)


def read_geometry(path) -> tuple:
    """``(spatial_shape, spacing)`` in canonical order, read from the header only."""
    path = Path(path)
    if not path.is_file():
        raise IoError(f"no such file: {path}")
    try:
        img = nib.load(str(path))
    except Exception as exc:
        raise ParseError(f"{path}: unreadable NIfTI header ({exc})") from exc
    shape = tuple(int(s) for s in img.shape)
    spatial = 2 if len(shape) == 2 else 3
    shape = shape[:spatial]
    zooms = tuple(float(z) for z in img.header.get_zooms()[:spatial])
    if spatial == 3:
        ornt = io_orientation(img.affine)
        canon_shape, canon_sp = [0] * 3, [0.0] * 3
        for i in range(3):
            canon_shape[int(ornt[i, 0])] = shape[i]
            canon_sp[int(ornt[i, 0])] = zooms[i]
        shape, zooms = tuple(canon_shape), tuple(canon_sp)
    return shape, zooms


def write_volume(v: Volume, path, dtype: str = "float32") -> None:
    """Write ``v`` as NIfTI-1, restoring the axis order implied by ``v.affine``."""
    path = Path(path)
    if dtype not in WRITE_DTYPES:
        raise UnsupportedFormat(f"cannot write dtype {dtype!r}; choose one of {sorted(WRITE_DTYPES)}")
    np_dtype = WRITE_DTYPES[dtype]
    data = np.asarray(v.data)
    if np.issubdtype(np_dtype, np.integer):
        info = np.iinfo(np_dtype)
        if not np.isfinite(data).all():
            raise RangeError(f"non-finite values cannot be stored as {dtype}")
        data = np.rint(data)
        if data.size and (data.min() < info.min or data.max() > info.max):
            raise RangeError(
                f"values in [{data.min()}, {data.max()}] overflow {dtype} range [{info.min}, {info.max}]"
            )
    arr = data.astype(np_dtype)
    arr = arr[0] if arr.shape[0] == 1 else np.moveaxis(arr, 0, -1)
    zooms = list(v.spacing)
    if v.ndim == 3:
        ornt = io_orientation(v.affine)
        arr = apply_orientation(arr, ornt_transform(_RAS, ornt))
        zooms = [v.spacing[int(ornt[i, 0])] for i in range(3)]
    if arr.ndim > v.ndim:
        zooms.append(1.0)

    img = nib.Nifti1Image(np.ascontiguousarray(arr), v.affine)
    img.header.set_data_dtype(np_dtype)
    img.header.set_zooms(zooms)
    img.header.set_xyzt_units("mm")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        nib.save(img, str(path))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def payload_sha256(path) -> str:
    """SHA-256 of a file's decompressed payload (``.gz`` files are inflated first)."""
    path = Path(path)
    h = hashlib.sha256()
    try:
        opener = gzip.open if _is_gz(path) else open
        with opener(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    except (EOFError, zlib.error, gzip.BadGzipFile) as exc:
        raise ParseError(f"{path}: corrupt compressed stream ({exc})") from exc
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return h.hexdigest()


def as_label_map(data: np.ndarray) -> np.ndarray:
    """Convert an integer-valued float array to an int64 label map."""
    data = np.asarray(data)
    if data.size and not np.array_equal(data, np.rint(data)):
        raise DomainError("label data contains non-integer values")
    labels = np.rint(data).astype(np.int64)
    if labels.size and labels.min() < 0:
        raise DomainError("label data contains negative values")
    return labels


# ---------------------------------------------------------------- resampling


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def _check_spacing(spacing) -> tuple:
    sp = tuple(float(s) for s in spacing)
    if not all(math.isfinite(s) and s > 0 for s in sp):
        raise DomainError(f"spacing must be strictly positive and finite, got {sp}")
    return sp


def resampled_shape(shape, in_spacing, out_spacing) -> tuple:
    """Per-axis ``round(dim * in / out)``, at least 1."""
    in_sp, out_sp = _check_spacing(in_spacing), _check_spacing(out_spacing)
    if not (len(shape) == len(in_sp) == len(out_sp)):
        raise DomainError("shape and spacings must have the same length")
    return tuple(max(1, _round_half_away(d * i / o)) for d, i, o in zip(shape, in_sp, out_sp))


def resample(data: np.ndarray, in_spacing, out_spacing, mode: str = "linear") -> np.ndarray:
    data = np.asarray(data)
    nd = len(in_spacing)
    if data.ndim < nd or data.size == 0:
        raise DomainError(f"cannot resample array of shape {data.shape} with {nd} spatial axes")
    target = resampled_shape(data.shape[-nd:], in_spacing, out_spacing)
    return resample_to_shape(data, target, mode)


def _resample_axis(a: np.ndarray, axis: int, m: int, mode: str) -> np.ndarray:
    n = a.shape[axis]
    j = np.arange(m, dtype=np.float64)
    if mode == "nearest":
        idx = np.minimum(np.floor((j + 0.5) * n / m).astype(np.intp), n - 1)
        return np.take(a, idx, axis=axis)
    x = np.clip((j + 0.5) * n / m - 0.5, 0.0, n - 1)
    i0 = np.floor(x).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    shape = [1] * a.ndim
    shape[axis] = m
    w = (x - i0).reshape(shape).astype(a.dtype)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    # lo + w*(hi-lo) keeps constant regions exactly constant
    return lo + w * (hi - lo)


def resample_to_shape(data: np.ndarray, target_shape, mode: str = "linear") -> np.ndarray:
    """Separable linear (or nearest) resampling of the trailing axes to ``target_shape``.

    Voxel centres are aligned (half-pixel convention) and coordinates are
    clamped at the borders.  Axes whose size does not change are left
    untouched, so a same-shape call returns the input values bit-for-bit.
    """
    if mode not in ("linear", "nearest"):
        raise DomainError(f"unknown interpolation mode {mode!r}")
    data = np.asarray(data)
    target = tuple(int(t) for t in target_shape)
    nd = len(target)
    if data.ndim < nd:
        raise DomainError(f"target rank {nd} exceeds array rank {data.ndim}")
    if any(t < 1 for t in target):
        raise DomainError(f"target shape must be >= 1 per axis, got {target}")
    if data.size == 0:
        raise DomainError("cannot resample an empty array")
    out = data
    if mode == "linear" and not np.issubdtype(out.dtype, np.floating):
        out = out.astype(np.float64)
    lead = data.ndim - nd
    for k, m in enumerate(target):
        axis = lead + k
        if out.shape[axis] != m:
            out = _resample_axis(out, axis, m, mode)
    return out


# ----------------------------------------------------------- normalization


def zscore_normalize(data: np.ndarray, mask: Optional[np.ndarray] = None, eps: float = NORM_EPS):
    """Return ``((data - mean) / max(std, eps), mean, std)``.

    Statistics are population statistics over ``mask`` (or all voxels),
    accumulated in float64.
    """
    data = np.asarray(data)
    x = data.astype(np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != data.shape:
            raise DomainError(f"mask shape {mask.shape} != data shape {data.shape}")
        if not mask.any():
            raise DomainError("normalization mask selects no voxels")
        vals = x[mask]
    else:
        vals = x.ravel()
    if vals.size == 0:
        raise DomainError("cannot normalize an empty array")
    mean = float(vals.mean())
    std = float(vals.std())
    out_dtype = data.dtype if np.issubdtype(data.dtype, np.floating) else np.float32
    if vals.max() == vals.min():
        out = np.zeros_like(x)
    else:
        out = (x - mean) / max(std, eps)
    return out.astype(out_dtype), mean, std


# --------------------------------------------------------- crop / pad / axes


def crop_to_nonzero(data: np.ndarray, seg: Optional[np.ndarray] = None, spatial_ndim: Optional[int] = None):
    """Crop to the tight box around voxels with ``|value| > 0`` in any channel.

    Spatial axes are the trailing ``spatial_ndim`` axes; by default the rank
    of ``seg`` when given, else every axis.
    """
    data = np.asarray(data)
    if spatial_ndim is None:
        spatial_ndim = np.ndim(seg) if seg is not None else data.ndim
    nd = int(spatial_ndim)
    shape = data.shape[data.ndim - nd:]
    if seg is not None and tuple(np.shape(seg)) != tuple(shape):
        raise DomainError(f"seg shape {np.shape(seg)} does not match spatial shape {shape}")
    nz = np.abs(data) > 0
    if data.ndim > nd:
        nz = nz.reshape((-1,) + shape).any(axis=0)
    if not nz.any():
        return data, seg, BBox.full(shape)
    start, size = [], []
    for ax in range(nd):
        hits = np.flatnonzero(nz.any(axis=tuple(a for a in range(nd) if a != ax)))
        start.append(int(hits[0]))
        size.append(int(hits[-1] - hits[0] + 1))
    box = BBox(tuple(start), tuple(size))
    cropped = data[(Ellipsis,) + box.slices]
    return cropped, (None if seg is None else np.asarray(seg)[box.slices]), box


def pad_to(data: np.ndarray, target_shape, value=0):
    """Constant-pad the trailing axes up to ``target_shape``; ``floor(d/2)`` goes before."""
    data = np.asarray(data)
    target = tuple(int(t) for t in target_shape)
    nd = len(target)
    shape = data.shape[data.ndim - nd:]
    if any(t < s for t, s in zip(target, shape)):
        raise DomainError(f"target shape {target} smaller than input {shape}")
    spec = tuple(((t - s) // 2, (t - s) - (t - s) // 2) for t, s in zip(target, shape))
    if not any(b or a for b, a in spec):
        return data, spec
    widths = [(0, 0)] * (data.ndim - nd) + list(spec)
    return np.pad(data, widths, mode="constant", constant_values=value), spec


def unpad(data: np.ndarray, pad_spec) -> np.ndarray:
    data = np.asarray(data)
    nd = len(pad_spec)
    slices = tuple(slice(b, data.shape[data.ndim - nd + i] - a) for i, (b, a) in enumerate(pad_spec))
    return data[(Ellipsis,) + slices]


def _check_order(order) -> tuple:
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(len(order))):
        raise DomainError(f"{order} is not a permutation of spatial axes")
    return order


def transpose_spatial(data: np.ndarray, order) -> np.ndarray:
    """Permute the trailing spatial axes: output axis ``i`` is input axis ``order[i]``."""
    order = _check_order(order)
    data = np.asarray(data)
    lead = data.ndim - len(order)
    if lead < 0:
        raise DomainError(f"order {order} has more axes than array of shape {data.shape}")
    return np.transpose(data, tuple(range(lead)) + tuple(lead + o for o in order))


def invert_order(order) -> tuple:
    order = _check_order(order)
    inv = [0] * len(order)
    for i, o in enumerate(order):
        inv[o] = i
    return tuple(inv)


# ------------------------------------------------------------ misc helpers


def gaussian_weight_map(patch_shape, sigma_scale: float = DEFAULT_SIGMA_SCALE) -> np.ndarray:
    """Separable Gaussian importance map with peak exactly 1 and no zero entries."""
    shape = tuple(int(s) for s in patch_shape)
    if any(s < 1 for s in shape):
        raise DomainError(f"patch shape must be >= 1 per axis, got {shape}")
    if not sigma_scale > 0:
        raise DomainError("sigma_scale must be positive")
    w = np.ones((), dtype=np.float64)
    for n in shape:
        d = np.abs(np.arange(n, dtype=np.float64) - (n - 1) / 2.0)
        prof = np.exp(-0.5 * (d / (sigma_scale * n)) ** 2)
        w = np.multiply.outer(w, prof)
    w = w / w.max()
    tiny = w[w > 0].min()
    return np.where(w > 0, w, tiny)


def one_hot(seg: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    seg = np.asarray(seg)
    if seg.size and (seg.min() < 0 or seg.max() >= num_classes):
        raise DomainError(f"labels must lie in [0, {num_classes}), got [{seg.min()}, {seg.max()}]")
    classes = np.arange(num_classes).reshape((num_classes,) + (1,) * seg.ndim)
    return (classes == seg[None]).astype(dtype)
