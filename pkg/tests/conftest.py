from __future__ import annotations

import numpy as np
import pytest

from segpipe import imagecore


def write_case(path, data, spacing=(1.0, 1.0, 1.0), dtype="float32", affine=None):
    data = np.asarray(data)
    v = imagecore.Volume(data[None] if data.ndim == len(spacing) else data, spacing, affine)
    imagecore.write_volume(v, path, dtype)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_source(root, cases):
    """``cases``: iterable of ``(case_id, image array, label array or None, spacing)``."""
    from segpipe.taskconv import SourceCase

    root.mkdir(parents=True, exist_ok=True)
    out = []
    for cid, img, seg, spacing in cases:
        ip = write_case(root / f"src_{cid}_img.nii.gz", img, spacing)
        lp = None
        if seg is not None:
            lp = write_case(root / f"src_{cid}_seg.nii.gz", seg, spacing, dtype="uint8")
        out.append(SourceCase(cid, [ip], lp))
    return out


def make_task(tmp_path, cases, name="Task001_Test", test_fraction=0.0, seed=0):
    from segpipe.taskconv import convert_task

    src = make_source(tmp_path / "source", cases)
    convert_task(src, tmp_path / "raw", name, test_fraction, seed)
    return tmp_path / "raw" / name


def blob_cases(n, shape=(8, 8, 8), spacings=None, seed=0):
    """Noisy cubes with a bright block and its label."""
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img = r.normal(0, 1, shape).astype(np.float32)
        seg = np.zeros(shape, dtype=np.uint8)
        lo = [int(r.integers(0, s - 3)) for s in shape]
        seg[tuple(slice(a, a + 3) for a in lo)] = 1
        img[seg > 0] += 4
        sp = spacings[i] if spacings else (1.0,) * len(shape)
        out.append((f"c{i:02d}", img, seg, sp))
    return out


def network_gradient_check(spec, x, target, seed=0, h=1e-6, keys=None):
    """Analytic vs central-difference gradients of the Dice+CE loss, float64.

    Returns ``max |analytic - numeric| / max |numeric|`` over the checked
    entries (all parameters unless ``keys`` restricts them).
    """
    from segpipe import model

    params = model.init_params(spec, seed, dtype=np.float64)
    # zero biases put dead units exactly on the ReLU kink; evaluate at a generic point instead
    r = np.random.default_rng(seed + 1)
    for k in params.keys():
        if k.endswith(".b"):
            params.arrays[k] = r.uniform(-0.1, 0.1, params[k].shape)
    logits, cache = model.forward_with_cache(params, spec, x)
    _, dz = model.dice_ce_loss(logits, target)
    grads = model.backward(params, spec, x, dz, cache)

    def loss_at(p):
        return model.dice_ce_loss(model.forward(p, spec, x), target)[0]

    num_all, ana_all = [], []
    for k in keys or params.keys():
        arr = params[k]
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = loss_at(params)
            arr[idx] = old - h
            down = loss_at(params)
            arr[idx] = old
            num_all.append((up - down) / (2 * h))
            ana_all.append(grads[k][idx])
    num, ana = np.asarray(num_all), np.asarray(ana_all)
    return float(np.abs(num - ana).max() / np.abs(num).max())


def make_sphere_preprocessed(tmp_path, n=6, shape=(16, 16, 16), radius=(3.0, 5.0), seed=0, test_fraction=0.0):
    """Synthetic sphere task converted, planned and preprocessed; returns ``(task_dir, pre_dir)``."""
    from segpipe import planner, preprocess
    from segpipe.synthetic import write_sphere_source
    from segpipe.taskconv import convert_task, guard_paths, load_source_spec

    cases, _ = load_source_spec(write_sphere_source(tmp_path / "src", n, seed, shape, radius=radius))
    convert_task(cases, tmp_path / "raw", "Task010_Spheres", test_fraction, seed)
    task = tmp_path / "raw" / "Task010_Spheres"
    guard = guard_paths("preprocess", task)
    plan = planner.make_plan_default(planner.fingerprint_dataset(task, guard=guard))
    pre = tmp_path / "pre"
    preprocess.preprocess_dataset(task, plan, pre, guard=guard)
    return task, pre


def synthetic_fingerprint(shape, spacing, channels=1, labels=(0, 1)):
    """A one-case fingerprint for building plans without a dataset on disk."""
    from segpipe import planner

    return planner.Fingerprint(
        case_ids=("a",),
        shapes=(tuple(shape),),
        spacings=(tuple(float(s) for s in spacing),),
        channels=channels,
        labels=tuple(labels),
        intensity=tuple(planner.ChannelStats(0.0, 1.0, -3.0, 0.0, 3.0) for _ in range(channels)),
        content_hash="0" * 64,
    )
