from __future__ import annotations

import gzip
import math

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from segpipe import imagecore
from segpipe.errors import DomainError, IoError, ParseError, RangeError, UnsupportedFormat
from segpipe.imagecore import Volume

from conftest import write_case

small_shapes = st.tuples(*[st.integers(1, 6)] * 3)
finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


# ----------------------------------------------------------------- I/O


def test_round_trip_float32_bit_exact(tmp_path, rng):
    data = rng.standard_normal((1, 5, 6, 7)).astype(np.float32)
    v = Volume(data, (0.5, 1.25, 3.0))
    imagecore.write_volume(v, tmp_path / "a.nii.gz")
    back = imagecore.read_volume(tmp_path / "a.nii.gz")
    assert back.data.dtype == np.float32
    assert np.array_equal(back.data, data)
    assert back.spacing == (0.5, 1.25, 3.0)
    assert np.array_equal(back.affine, v.affine)


def test_round_trip_non_ras_affine(tmp_path, rng):
    # file stored as (A, L, I) is canonicalized on read and restored on write
    data = rng.standard_normal((4, 5, 6)).astype(np.float32)
    aff = np.array([[0, -2.0, 0, 10], [3.0, 0, 0, -5], [0, 0, -1.5, 7], [0, 0, 0, 1]])
    nib.save(nib.Nifti1Image(data, aff), str(tmp_path / "raw.nii.gz"))
    v = imagecore.read_volume(tmp_path / "raw.nii.gz")
    assert v.shape == (5, 4, 6)
    assert v.spacing == (2.0, 3.0, 1.5)
    imagecore.write_volume(v, tmp_path / "out.nii.gz")
    img = nib.load(str(tmp_path / "out.nii.gz"))
    assert np.array_equal(img.affine, aff)
    assert np.array_equal(np.asarray(img.dataobj), data)


def test_header_spacing_echo(tmp_path):
    write_case(tmp_path / "s.nii.gz", np.zeros((3, 3, 3)), (2.0, 2.0, 2.0))
    assert imagecore.read_volume(tmp_path / "s.nii.gz").spacing == (2.0, 2.0, 2.0)


def test_labels_uint8_lossless(tmp_path, rng):
    seg = rng.integers(0, 3, (6, 5, 4)).astype(np.float32)
    write_case(tmp_path / "l.nii.gz", seg, dtype="uint8")
    back = imagecore.read_volume(tmp_path / "l.nii.gz").data[0]
    assert np.array_equal(back, seg)
    assert set(np.unique(back)) <= {0, 1, 2}


def test_int16_overflow_raises(tmp_path):
    with pytest.raises(RangeError):
        write_case(tmp_path / "o.nii.gz", np.full((2, 2, 2), 300000.0), dtype="int16")


def test_gzip_output_is_gzip(tmp_path):
    write_case(tmp_path / "g.nii.gz", np.ones((2, 2, 2)))
    with gzip.open(tmp_path / "g.nii.gz") as fh:
        assert len(fh.read()) > 348
    write_case(tmp_path / "p.nii", np.ones((2, 2, 2)))
    assert imagecore.read_volume(tmp_path / "p.nii").shape == (2, 2, 2)


def test_missing_file_ioerror(tmp_path):
    with pytest.raises(IoError):
        imagecore.read_volume(tmp_path / "nope.nii.gz")


def test_truncated_file_parse_error(tmp_path, rng):
    p = tmp_path / "t.nii"
    write_case(p, rng.standard_normal((8, 8, 8)))
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ParseError):
        imagecore.read_volume(p)


def test_unsupported_datatype(tmp_path):
    nib.save(nib.Nifti1Image(np.zeros((2, 2, 2), dtype=np.float64), np.eye(4)), str(tmp_path / "d.nii"))
    with pytest.raises(UnsupportedFormat):
        imagecore.read_volume(tmp_path / "d.nii")


def test_nan_rejected(tmp_path):
    a = np.zeros((2, 2, 2), dtype=np.float32)
    a[0, 0, 0] = np.nan
    nib.save(nib.Nifti1Image(a, np.eye(4)), str(tmp_path / "n.nii"))
    with pytest.raises(ParseError):
        imagecore.read_volume(tmp_path / "n.nii")


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoError):
        write_case(blocker / "sub" / "a.nii.gz", np.zeros((2, 2, 2)))


def test_volume_invariants():
    with pytest.raises(DomainError):
        Volume(np.zeros((1, 2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(DomainError):
        Volume(np.zeros((1, 2)), (1.0,))


# ------------------------------------------------------------ resample


def _round_half_away(x):
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def test_resample_shape_example():
    out = imagecore.resample(np.zeros((1, 4, 4, 4)), (1, 1, 1), (2, 2, 2))
    assert out.shape == (1, 2, 2, 2)


@given(small_shapes, st.tuples(*[st.sampled_from([0.5, 0.7, 1.0, 1.5, 2.0, 3.3])] * 3), st.tuples(*[st.sampled_from([0.4, 1.0, 1.25, 2.0, 5.0])] * 3))
def test_resample_shape_formula(shape, sin, sout):
    expected = tuple(max(1, _round_half_away(n * a / b)) for n, a, b in zip(shape, sin, sout))
    assert imagecore.resampled_shape(shape, sin, sout) == expected
    assert imagecore.resample(np.zeros((1,) + shape), sin, sout).shape[1:] == expected


def test_resample_identity_bit_exact(rng):
    a = rng.standard_normal((2, 5, 4, 3)).astype(np.float32)
    assert np.array_equal(imagecore.resample(a, (1, 2, 3), (1, 2, 3)), a)
    assert np.array_equal(imagecore.resample_to_shape(a, (5, 4, 3)), a)


def test_resample_nonpositive_spacing():
    with pytest.raises(DomainError):
        imagecore.resample(np.zeros((1, 2, 2, 2)), (1, 1, 0), (1, 1, 1))


@given(st.tuples(*[st.integers(1, 9)] * 3))
def test_nearest_preserves_value_set(target):
    seg = np.zeros((4, 4, 4), dtype=np.int64)
    seg[1:3, :, 2:] = 2
    out = imagecore.resample_to_shape(seg, target, "nearest")
    assert out.shape == target
    assert set(np.unique(out)) <= {0, 2}


@given(finite, st.tuples(*[st.integers(1, 9)] * 3))
def test_constant_input_constant_output(c, target):
    a = np.full((1, 4, 3, 5), c, dtype=np.float32)
    out = imagecore.resample_to_shape(a, target)
    assert out.shape == (1,) + target
    assert np.all(out == np.float32(c))


def test_resample_to_shape_rank_mismatch():
    with pytest.raises(DomainError):
        imagecore.resample_to_shape(np.zeros((4, 4)), (8, 8, 8))


def test_linear_upsample_matches_oracle():
    # half-pixel convention with clamping, evaluated independently per output index
    a = np.array([0.0, 1.0, 4.0, 9.0])
    out = imagecore.resample_to_shape(a[None, :, None], (8, 1), "linear")[0, :, 0]
    n, m = 4, 8
    oracle = []
    for j in range(m):
        x = min(max((j + 0.5) * n / m - 0.5, 0.0), n - 1)
        lo = int(math.floor(x))
        hi = min(lo + 1, n - 1)
        oracle.append(a[lo] + (x - lo) * (a[hi] - a[lo]))
    assert np.allclose(out, oracle, atol=1e-12)


# -------------------------------------------------------------- zscore


def test_zscore_examples():
    out, mean, std = imagecore.zscore_normalize(np.array([0.0, 10.0]))
    assert np.allclose(out, [-1.0, 1.0], atol=1e-6)
    assert (mean, std) == (5.0, 5.0)
    out, _, _ = imagecore.zscore_normalize(np.full((3, 3), 7.0))
    assert np.all(out == 0)
    d = np.array([0.0, 0.0, 4.0, 8.0])
    out, mean, std = imagecore.zscore_normalize(d, d != 0)
    assert np.allclose(out, [-3, -3, -1, 1])
    assert (mean, std) == (6.0, 2.0)


def test_zscore_empty_mask():
    with pytest.raises(DomainError):
        imagecore.zscore_normalize(np.ones(4), np.zeros(4, dtype=bool))


@settings(max_examples=50)
@given(hnp.arrays(np.float64, st.integers(2, 50), elements=st.floats(-1e3, 1e3)))
def test_zscore_moments(a):
    if a.std() <= 1e-3:
        return
    out, _, _ = imagecore.zscore_normalize(a)
    assert abs(out.mean()) < 1e-5
    assert abs(out.std() - 1) < 1e-5


# -------------------------------------------------------- crop/pad/transpose


def test_crop_single_voxel():
    a = np.zeros((4, 4, 4))
    a[1, 1, 1] = 5
    out, _, box = imagecore.crop_to_nonzero(a)
    assert out.shape == (1, 1, 1)
    assert box.start == (1, 1, 1)


def test_crop_all_zero_and_tight():
    z = np.zeros((1, 3, 4, 5))
    out, _, box = imagecore.crop_to_nonzero(z, spatial_ndim=3)
    assert out.shape == z.shape and box.start == (0, 0, 0) and box.size == (3, 4, 5)
    t = np.ones((1, 3, 4, 5))
    out, _, box = imagecore.crop_to_nonzero(t, spatial_ndim=3)
    assert np.array_equal(out, t) and box.start == (0, 0, 0)


def test_crop_seg_shape_mismatch():
    with pytest.raises(DomainError):
        imagecore.crop_to_nonzero(np.ones((1, 3, 3, 3)), np.zeros((2, 3, 3)))


@settings(max_examples=40)
@given(hnp.arrays(np.float32, st.tuples(st.just(1), *[st.integers(1, 6)] * 3), elements=st.sampled_from([0.0, 0.0, 0.0, 1.5, -2.0])))
def test_crop_idempotent_and_seg_follows(a):
    seg = (a[0] != 0).astype(np.int64)
    c1, s1, b1 = imagecore.crop_to_nonzero(a, seg)
    c2, s2, b2 = imagecore.crop_to_nonzero(c1, s1)
    assert np.array_equal(c1, c2) and np.array_equal(s1, s2)
    assert np.array_equal(a[(slice(None),) + b1.slices], c1)


def test_pad_example():
    out, spec = imagecore.pad_to(np.ones((3, 3, 3)), (4, 4, 4))
    assert out.shape == (4, 4, 4)
    assert spec == ((0, 1), (0, 1), (0, 1))
    same, spec = imagecore.pad_to(np.ones((3, 3, 3)), (3, 3, 3))
    assert spec == ((0, 0),) * 3


def test_pad_too_small():
    with pytest.raises(DomainError):
        imagecore.pad_to(np.ones((3, 3)), (2, 3))


@given(small_shapes, st.tuples(*[st.integers(0, 5)] * 3))
def test_unpad_pad_identity(shape, extra):
    a = np.arange(np.prod(shape), dtype=np.float32).reshape(shape)
    target = tuple(n + e for n, e in zip(shape, extra))
    padded, spec = imagecore.pad_to(a, target, value=-1)
    assert padded.shape == target
    assert all(b == e // 2 and b + af == e for (b, af), e in zip(spec, extra))
    assert np.array_equal(imagecore.unpad(padded, spec), a)


def test_invert_order_example():
    assert imagecore.invert_order((2, 0, 1)) == (1, 2, 0)


@given(st.permutations([0, 1, 2]), small_shapes)
def test_transpose_round_trip(order, shape):
    order = tuple(order)
    a = np.random.default_rng(0).standard_normal((2,) + shape)
    t = imagecore.transpose_spatial(a, order)
    assert t.shape[1:] == tuple(shape[o] for o in order)
    assert np.array_equal(imagecore.transpose_spatial(t, imagecore.invert_order(order)), a)
    inv = imagecore.invert_order(order)
    assert all(order[inv[i]] == i for i in range(3))


def test_transpose_identity_and_bad_order():
    a = np.ones((1, 2, 3, 4))
    assert np.array_equal(imagecore.transpose_spatial(a, (0, 1, 2)), a)
    with pytest.raises(DomainError):
        imagecore.transpose_spatial(a, (0, 0, 2))


# ------------------------------------------------------------- weights


@given(st.tuples(*[st.integers(1, 12)] * 3))
def test_gaussian_map_properties(shape):
    w = imagecore.gaussian_weight_map(shape)
    assert w.shape == shape
    assert w.max() == 1.0
    assert np.all(w > 0)
    for ax in range(3):
        assert np.array_equal(w, np.flip(w, ax))


def test_gaussian_center_and_degenerate():
    w = imagecore.gaussian_weight_map((5, 7, 9))
    assert w[2, 3, 4] == 1.0
    assert imagecore.gaussian_weight_map((1, 1, 1)).tolist() == [[[1.0]]]


def test_one_hot():
    oh = imagecore.one_hot(np.array([0, 1]), 2)
    assert oh.tolist() == [[1, 0], [0, 1]]
    seg = np.random.default_rng(0).integers(0, 4, (5, 5, 5))
    oh = imagecore.one_hot(seg, 4)
    assert np.all(oh.sum(0) == 1)
    assert np.array_equal(oh.argmax(0), seg)
    with pytest.raises(DomainError):
        imagecore.one_hot(np.array([0, 3]), 3)


def test_as_label_map_rejects_bad_values():
    with pytest.raises(DomainError):
        imagecore.as_label_map(np.array([0.5, 1.0]))
    with pytest.raises(DomainError):
        imagecore.as_label_map(np.array([-1.0, 1.0]))
    assert imagecore.as_label_map(np.array([0.0, 2.0])).dtype == np.int64
