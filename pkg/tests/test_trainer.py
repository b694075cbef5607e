from __future__ import annotations

import json
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from segpipe import trainer
from segpipe.augment import AugmentationConfig
from segpipe.errors import BudgetError, DomainError, ResumeConflict, SplitError, SplitFormatError
from segpipe.model import ModelSpec, load_checkpoint
from segpipe.preprocess import CaseRecord, InversionMeta
from segpipe.imagecore import BBox
from segpipe.trainer import ExperimentConfig, activation_bytes, infer_patch_size, make_splits, sample_patch

from conftest import make_sphere_preprocessed


def _split_oracle(ids, k, seed):
    order = sorted(ids)
    random.Random(seed).shuffle(order)
    return [sorted(order[i::k]) for i in range(k)]


@settings(max_examples=40)
@given(st.integers(1, 40), st.integers(2, 7), st.integers(0, 10_000))
def test_split_invariants(n, k, seed):
    ids = [f"id{i:03d}" for i in range(n)]
    if n < k:
        with pytest.raises(SplitError):
            make_splits(ids, k, seed)
        return
    s = make_splits(ids, k, seed)
    flat = [c for f in s.folds for c in f]
    assert sorted(flat) == ids and len(set(flat)) == n
    sizes = [len(f) for f in s.folds]
    assert max(sizes) - min(sizes) <= 1
    assert [list(f) for f in s.folds] == _split_oracle(ids, k, seed)
    for f in range(k):
        assert set(s.train(f, ids)) | set(s.val(f)) == set(ids)
        assert not set(s.train(f, ids)) & set(s.val(f))


def test_split_examples():
    ids = [f"c{i}" for i in range(10)]
    s = make_splits(ids, 5, 0)
    assert [len(f) for f in s.folds] == [2] * 5
    with pytest.raises(SplitError):
        make_splits(ids[:3], 5, 0)
    h = make_splits(ids, 1, 0, holdout=0.2)
    assert h.k == 1 and len(h.val(0)) == 2


def test_splits_persist_and_win(tmp_path):
    pre = tmp_path / "pre"
    pre.mkdir()
    for i in range(10):
        (pre / f"case_c{i}.meta.json").write_text("{}")
        (pre / f"case_c{i}.bin").write_bytes(b"")
    a = trainer.get_or_create_splits(pre, 5, seed=1)
    raw = (pre / "splits.json").read_bytes()
    b = trainer.get_or_create_splits(pre, 5, seed=99)
    assert a == b and (pre / "splits.json").read_bytes() == raw
    (pre / "splits.json").write_text("{not json")
    with pytest.raises(SplitFormatError):
        trainer.get_or_create_splits(pre, 5)
    (pre / "splits.json").write_text(json.dumps({"k": 2, "seed": 0, "folds": [["c0"], ["c0"]]}))
    with pytest.raises(SplitFormatError):
        trainer.get_or_create_splits(pre, 5)


def test_activation_estimate_closed_form():
    # depth 1, base 2, 8^3, batch 1: 512 in + 2048+128 enc + 512 mid
    # + 2048 up + 1024 upconv + 2048 cat + 2048 dec + 1024 logits = 11392 values
    spec = ModelSpec(3, 1, 2)
    assert activation_bytes((8, 8, 8), spec, batch_size=1, dtype_bytes=4) == 11392 * 2 * 4


def test_patch_size_huge_budget():
    assert infer_patch_size([(100, 100, 100)] * 3, ModelSpec(3, 2, 8), 1 << 40) == (100, 100, 100)
    assert infer_patch_size([(101, 99, 50)], ModelSpec(3, 2, 8), 1 << 40) == (100, 96, 48)


def _shrink_oracle(shape, spec, budget):
    div = spec.divisor
    patch = [max(4 * div, s // div * div) for s in shape]
    while activation_bytes(patch, spec) > budget:
        i = int(np.argmax(patch))
        patch[i] -= div
    return tuple(patch)


@pytest.mark.parametrize("budget_mib", [8, 16, 48, 128])
def test_patch_size_tight_budget(budget_mib):
    spec = ModelSpec(3, 2, 8)
    got = infer_patch_size([(100, 100, 100)], spec, budget_mib << 20)
    assert got == _shrink_oracle((100, 100, 100), spec, budget_mib << 20)
    assert activation_bytes(got, spec) <= budget_mib << 20
    assert got == infer_patch_size([(100, 100, 100)], spec, budget_mib << 20)


def test_patch_size_depth3_divisible_and_errors():
    spec = ModelSpec(3, 3, 4)
    got = infer_patch_size([(90, 70, 50)], spec, 64 << 20)
    assert all(p % 8 == 0 for p in got)
    with pytest.raises(BudgetError):
        infer_patch_size([(100, 100, 100)], spec, 1024)
    with pytest.raises(DomainError):
        infer_patch_size([(100, 100, 100)], spec, 0)


def _record(image, label):
    fg = np.argwhere(label > 0).astype(np.int32)
    meta = InversionMeta(label.shape, (1.0,) * label.ndim, tuple(range(label.ndim)), BBox.full(label.shape), label.shape, ((0, 0),) * label.ndim, "h")
    return CaseRecord("x", image, meta, label, fg)


def test_sample_patch_forced_foreground():
    lab = np.zeros((20, 20, 20), np.int64)
    lab[17, 2, 9] = 1
    rec = _record(np.zeros((1, 20, 20, 20), np.float32), lab)
    rng = np.random.default_rng(0)
    for _ in range(50):
        _, lp = sample_patch(rec, (8, 8, 8), rng, fg_p=1.0)
        assert lp.sum() == 1


def test_sample_patch_full_and_small_cases(rng):
    img = rng.standard_normal((1, 8, 8, 8)).astype(np.float32)
    lab = rng.integers(0, 2, (8, 8, 8))
    rec = _record(img, lab)
    ip, lp = sample_patch(rec, (8, 8, 8), rng)
    assert np.array_equal(ip, img) and np.array_equal(lp, lab)
    ip, lp = sample_patch(rec, (16, 8, 12), rng, fg_p=1.0)
    assert ip.shape == (1, 16, 8, 12) and lp.sum() == lab.sum()
    ip, lp = sample_patch(rec, (8, 8), rng, plane_axis=1)
    assert ip.shape == (1, 8, 8) and lp.shape == (8, 8)


def test_sample_patch_uniform_chi_square():
    lab = np.zeros((6, 6), np.int64)
    lab[0, 0] = 1
    img = np.arange(36, dtype=np.float32).reshape(1, 6, 6)
    rec = _record(img, lab)
    rng = np.random.default_rng(7)
    counts = np.zeros((3, 3))
    n = 9000
    for _ in range(n):
        ip, _ = sample_patch(rec, (4, 4), rng, fg_p=0.0)
        o = int(ip[0, 0, 0])
        counts[o // 6, o % 6] += 1
    assert stats.chisquare(counts.ravel()).pvalue > 0.01


def test_config_validation_and_round_trip():
    cfg = ExperimentConfig("T", spec=ModelSpec(2, 2, 4), model="unet2d", plane_axis=1, patch_size=(8, 12))
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.model_name == "unet2d_plane1"
    assert cfg.lr_at(0) == cfg.lr0 and cfg.lr_at(500) == pytest.approx(0.01 * 0.5 ** 0.9)
    for kw in ({"fold": 5}, {"total_steps": 0}, {"mem_budget": 0}, {"model": "unet2d"}, {"plane_axis": 0}):
        with pytest.raises(DomainError):
            ExperimentConfig("T", **kw)


def _cfg(**kw):
    base = dict(
        task="Task010_Spheres", spec=ModelSpec(3, 2, 4), k=3, total_steps=8, batch_size=2,
        steps_per_epoch=4, patch_size=(16, 16, 16), augmentation=AugmentationConfig.disabled(),
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def spheres(tmp_path_factory):
    return make_sphere_preprocessed(tmp_path_factory.mktemp("spheres"), n=6)


def test_versioning_and_resume(spheres, tmp_path):
    _, pre = spheres
    runs = tmp_path / "runs"
    full = trainer.train(_cfg(), pre, runs)
    assert full.name == "version_0"
    again = trainer.train(_cfg(), pre, runs)
    assert again.name == "version_1"
    ref = [r["loss"] for r in trainer.read_log(full)]
    assert ref == [r["loss"] for r in trainer.read_log(again)]

    runs2 = tmp_path / "runs2"
    part = trainer.train(_cfg(), pre, runs2, stop_after=3)
    assert load_checkpoint(part / trainer.LATEST).step == 3
    with pytest.raises(ResumeConflict):
        trainer.train(_cfg(lr0=0.02), pre, runs2)
    done = trainer.train(_cfg(), pre, runs2)
    assert done == part
    rows = trainer.read_log(done)
    assert [r["step"] for r in rows] == list(range(1, 9))
    assert [r["loss"] for r in rows] == ref
    best = load_checkpoint(done / trainer.BEST).extra["best_val_dice"]
    assert best == max(r["val_dice"] for r in rows if "val_dice" in r)
    snap = json.loads((done / "config.json").read_text())
    assert snap["lr0"] == 0.01


def test_2d_training_runs(spheres, tmp_path):
    _, pre = spheres
    cfg = _cfg(model="unet2d", spec=ModelSpec(2, 2, 4), plane_axis=2, patch_size=(16, 16), total_steps=4)
    run = trainer.train(cfg, pre, tmp_path / "runs")
    assert run.parent.parent.name == "unet2d_plane2"
    ck = load_checkpoint(run / trainer.LATEST)
    assert ck.extra["plane_axis"] == 2 and ck.extra["patch_size"] == [16, 16]


def test_single_case_overfit(tmp_path):
    _, pre = make_sphere_preprocessed(tmp_path, n=2, shape=(16, 16, 16))
    cfg = _cfg(k=1, holdout=0.5, total_steps=200, steps_per_epoch=200, lr0=0.02, batch_size=1, fg_p=0.0)
    rows = trainer.read_log(trainer.train(cfg, pre, tmp_path / "runs"))
    assert rows[-1]["loss"] < 0.1 * rows[0]["loss"]
