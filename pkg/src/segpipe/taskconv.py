"""Task conversion: raw cases -> fixed on-disk layout with a held-out test partition.

Layout of a converted task::

    TaskXXX_Name/
        manifest.json
        imagesTr/case_<id>_<modality:04d>.nii.gz
        labelsTr/case_<id>.nii.gz        (or case_<id>.txt for class labels)
        imagesTs/...
        labelsTs/...
"""
from __future__ import annotations

import gzip
import json
import math
import os
import random
import re
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import imagecore
from .errors import (
    DomainError,
    DuplicateCase,
    GeometryError,
    IoError,
    LeakageError,
    MissingLabel,
    ParseError,
    SegPipeError,
    TaskExists,
)

TASK_RE = re.compile(r"^Task\d{3}_[A-Za-z0-9][A-Za-z0-9-]*$")
CASE_ID_RE = re.compile(r"^[A-Za-z0-9-]+$")
IMAGE_RE = re.compile(r"^case_(?P<id>[A-Za-z0-9-]+)_(?P<mod>\d{4})\.nii\.gz$")
LABEL_RE = re.compile(r"^case_(?P<id>[A-Za-z0-9-]+)\.(?P<ext>nii\.gz|txt)$")

TRAIN_DIRS = ("imagesTr", "labelsTr")
TEST_DIRS = ("imagesTs", "labelsTs")
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
SPACING_TOL = 1e-4


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------- source


@dataclass
class SourceCase:
    case_id: str
    images: list
    label: Optional[Path] = None

    def __post_init__(self):
        self.case_id = str(self.case_id)
        self.images = [Path(p) for p in self.images]
        self.label = None if self.label is None else Path(self.label)


def load_source_spec(path) -> tuple:
    """Read a JSON source description: ``{"description": str, "cases": [{"id", "images", "label"}]}``.

    Relative paths resolve against the spec file's directory.
    """
    path = Path(path)
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read source spec {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    base = path.parent
    cases = []
    for entry in spec.get("cases", []):
        try:
            images = [base / p for p in entry["images"]]
            label = entry.get("label")
            cases.append(SourceCase(entry["id"], images, None if label is None else base / label))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"{path}: malformed case entry {entry!r}") from exc
    return cases, spec.get("description", str(path))


# -------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    path: str
    sha256: str
    size: int
    case_id: str
    partition: str


@dataclass
class Manifest:
    task: str
    seed: int
    test_fraction: float
    source: str
    files: list = field(default_factory=list)
    format_version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "task": self.task,
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "source": self.source,
            "files": [asdict(e) for e in self.files],
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        try:
            return cls(
                task=d["task"],
                seed=int(d["seed"]),
                test_fraction=float(d["test_fraction"]),
                source=d["source"],
                files=[ManifestEntry(**e) for e in d["files"]],
                format_version=int(d["format_version"]),
            )
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed manifest: {exc}") from exc

    @classmethod
    def load(cls, path) -> "Manifest":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc})") from exc

    def cases(self, partition: str) -> list:
        return sorted({e.case_id for e in self.files if e.partition == partition})


def split_test_cases(case_ids: Iterable[str], test_fraction: float, seed: int) -> list:
    """Seeded shuffle of the sorted ids; the first ``ceil(N * f)`` form the test set."""
    if not 0 <= test_fraction < 1:
        raise DomainError(f"test_fraction must be in [0, 1), got {test_fraction}")
    ids = sorted(case_ids)
    random.Random(seed).shuffle(ids)
    # round() absorbs binary noise such as 10 * 0.7 = 7.000000000000001
    n_test = math.ceil(round(len(ids) * test_fraction, 9))
    return sorted(ids[:n_test])


def _check_case(case: SourceCase) -> None:
    if not CASE_ID_RE.match(case.case_id):
        raise DomainError(f"case id {case.case_id!r} must match {CASE_ID_RE.pattern}")
    if not case.images:
        raise DomainError(f"case {case.case_id}: no images")
    for p in case.images + ([case.label] if case.label else []):
        if not p.is_file():
            raise IoError(f"case {case.case_id}: missing file {p}")
        if not (p.name.endswith(".nii") or p.name.endswith(".nii.gz") or p.suffix == ".txt"):
            raise DomainError(f"case {case.case_id}: unsupported file type {p.name}")
    geoms = [imagecore.read_geometry(p) for p in case.images]
    if case.label is not None and case.label.suffix != ".txt":
        geoms.append(imagecore.read_geometry(case.label))
    shape0, sp0 = geoms[0]
    for shape, sp in geoms[1:]:
        if shape != shape0:
            raise GeometryError(f"case {case.case_id}: shape {shape} does not match {shape0}")
        if any(abs(a - b) > SPACING_TOL for a, b in zip(sp, sp0)):
            raise GeometryError(f"case {case.case_id}: spacing {sp} does not match {sp0}")


def _dest_name(case_id: str, src: Path, modality: Optional[int]) -> str:
    ext = "txt" if src.suffix == ".txt" else "nii.gz"
    if modality is None:
        return f"case_{case_id}.{ext}"
    return f"case_{case_id}_{modality:04d}.{ext}"


def _planned_files(cases: Sequence[SourceCase], test_ids: set) -> list:
    out = []
    for case in cases:
        part = "test" if case.case_id in test_ids else "train"
        img_dir, lbl_dir = ("imagesTs", "labelsTs") if part == "test" else ("imagesTr", "labelsTr")
        for m, src in enumerate(case.images):
            out.append((src, f"{img_dir}/{_dest_name(case.case_id, src, m)}", case.case_id, part))
        if case.label is not None:
            out.append((case.label, f"{lbl_dir}/{_dest_name(case.case_id, case.label, None)}", case.case_id, part))
    return sorted(out, key=lambda t: t[1])


def _store(src: Path, dest: Path) -> int:
    dest.parent.mkdir(parents=True, exist_ok=True)
    if src.name.endswith(".nii"):
        with open(src, "rb") as fin, open(dest, "wb") as raw:
            with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz:
                shutil.copyfileobj(fin, gz)
    else:
        shutil.copyfile(src, dest)
    return dest.stat().st_size


def convert_task(
    source: Sequence[SourceCase],
    dest_root,
    task_name: str,
    test_fraction: float = 0.2,
    seed: int = 0,
    description: str = "",
    force: bool = False,
    jobs: int = 1,
) -> Manifest:
    """Copy ``source`` cases into the task layout and write ``manifest.json``.

    Re-running with the same inputs is a no-op.  An existing task with a
    different manifest is left alone unless ``force`` is set.
    """
    if not TASK_RE.match(task_name):
        raise DomainError(f"task name {task_name!r} must look like TaskXXX_Name")
    if not 0 <= test_fraction < 1:
        raise DomainError(f"test_fraction must be in [0, 1), got {test_fraction}")
    cases = [c if isinstance(c, SourceCase) else SourceCase(**c) for c in source]
    seen = set()
    for c in cases:
        if c.case_id in seen:
            raise DuplicateCase(f"duplicate case id {c.case_id!r}")
        seen.add(c.case_id)
    if not cases:
        raise DomainError("no cases to convert")
    cases.sort(key=lambda c: c.case_id)

    for c in cases:
        _check_case(c)
    test_ids = set(split_test_cases(seen, test_fraction, seed))
    for c in cases:
        if c.case_id not in test_ids and c.label is None:
            raise MissingLabel(f"case {c.case_id} is in the training partition but has no label")

    planned = _planned_files(cases, test_ids)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        hashes = list(pool.map(lambda t: imagecore.payload_sha256(t[0]), planned))

    task_dir = Path(dest_root) / task_name
    manifest_path = task_dir / MANIFEST_NAME
    if task_dir.exists():
        if manifest_path.is_file():
            old = Manifest.load(manifest_path)
            same = (
                old.seed == seed
                and old.test_fraction == test_fraction
                and [(e.path, e.sha256, e.case_id, e.partition) for e in old.files]
                == [(rel, h, cid, part) for (_, rel, cid, part), h in zip(planned, hashes)]
            )
            if same:
                return old
        if any(task_dir.iterdir()):
            if not force:
                raise TaskExists(f"{task_dir} already exists with different content (use force to replace)")
            shutil.rmtree(task_dir)

    for d in TRAIN_DIRS + TEST_DIRS:
        (task_dir / d).mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        sizes = list(pool.map(lambda t: _store(t[0], task_dir / t[1]), planned))

    manifest = Manifest(
        task=task_name,
        seed=int(seed),
        test_fraction=float(test_fraction),
        source=description,
        files=[
            ManifestEntry(rel, h, size, cid, part)
            for (_, rel, cid, part), h, size in zip(planned, hashes, sizes)
        ],
    )
    atomic_write_text(manifest_path, manifest.to_json())
    return manifest


# ------------------------------------------------------------ path guard


@dataclass(frozen=True)
class PathGuard:
    """Read context for stages that must never see the test partition."""

    root: Path
    stage: str
    forbidden: tuple

    def check(self, path) -> Path:
        p = Path(os.path.abspath(path))
        for bad in self.forbidden:
            if p == bad or bad in p.parents:
                raise LeakageError(f"{self.stage} stage may not access {p} (test partition)")
        return Path(path)

    def open(self, path, mode: str = "rb"):
        if any(c in mode for c in "wax+"):
            raise DomainError("guarded opens are read-only")
        return open(self.check(path), mode)

    def listdir(self, path) -> list:
        return sorted(os.listdir(self.check(path)))

    def read_volume(self, path) -> imagecore.Volume:
        return imagecore.read_volume(self.check(path))

    def read_text(self, path) -> str:
        with self.open(path, "r") as fh:
            return fh.read()

    def payload_sha256(self, path) -> str:
        return imagecore.payload_sha256(self.check(path))


GUARDED_STAGES = ("preprocess", "train")


def guard_paths(stage: str, task_dir) -> PathGuard:
    if stage not in GUARDED_STAGES:
        raise DomainError(f"no guard is defined for stage {stage!r}; guarded stages are {GUARDED_STAGES}")
    root = Path(os.path.abspath(task_dir))
    return PathGuard(root, stage, tuple(root / d for d in TEST_DIRS))


@dataclass
class CaseFiles:
    case_id: str
    images: list
    label: Optional[Path]


def list_cases(task_dir, partition: str = "train", guard: Optional[PathGuard] = None) -> list:
    """Group the files of one partition by case id (sorted)."""
    task_dir = Path(task_dir)
    img_dir, lbl_dir = ("imagesTr", "labelsTr") if partition == "train" else ("imagesTs", "labelsTs")
    ls = guard.listdir if guard is not None else (lambda p: sorted(os.listdir(p)))
    if not (task_dir / img_dir).is_dir():
        raise IoError(f"{task_dir / img_dir} does not exist")
    images: dict = {}
    for name in ls(task_dir / img_dir):
        m = IMAGE_RE.match(name)
        if m:
            images.setdefault(m["id"], {})[int(m["mod"])] = task_dir / img_dir / name
    labels = {}
    if (task_dir / lbl_dir).is_dir():
        for name in ls(task_dir / lbl_dir):
            m = LABEL_RE.match(name)
            if m:
                labels[m["id"]] = task_dir / lbl_dir / name
    out = []
    for cid in sorted(images):
        mods = images[cid]
        if sorted(mods) != list(range(len(mods))):
            raise GeometryError(f"case {cid}: modality indices {sorted(mods)} are not contiguous from 0")
        out.append(CaseFiles(cid, [mods[k] for k in sorted(mods)], labels.get(cid)))
    return out


# ------------------------------------------------------------ validation


@dataclass
class Finding:
    severity: str
    code: str
    message: str
    path: str = ""


@dataclass
class ValidationReport:
    task_dir: str
    findings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(f.severity == "error" for f in self.findings)

    def add(self, severity, code, message, path="") -> None:
        self.findings.append(Finding(severity, code, message, str(path)))

    def to_dict(self) -> dict:
        return {"task_dir": self.task_dir, "ok": self.ok, "findings": [asdict(f) for f in self.findings]}


def validate_task(task_dir) -> ValidationReport:
    """Integrity checks over a converted task; never raises for content problems."""
    task_dir = Path(task_dir)
    if not task_dir.is_dir():
        raise IoError(f"{task_dir} is not a readable directory")
    report = ValidationReport(str(task_dir))
    if not TASK_RE.match(task_dir.name):
        report.add("warning", "naming", f"task directory name {task_dir.name!r} does not follow TaskXXX_Name", task_dir)

    present = {}
    for sub in TRAIN_DIRS + TEST_DIRS:
        d = task_dir / sub
        if not d.is_dir():
            report.add("error", "missing_dir", f"{sub} is missing", d)
            continue
        regex = IMAGE_RE if sub.startswith("images") else LABEL_RE
        for name in sorted(os.listdir(d)):
            if not regex.match(name):
                report.add("error", "naming", f"unexpected file name {name!r}", d / name)
            else:
                present[f"{sub}/{name}"] = d / name

    for partition in ("train", "test"):
        try:
            cases = list_cases(task_dir, partition)
        except SegPipeError as exc:
            report.add("error", "layout", str(exc))
            continue
        for case in cases:
            if case.label is None:
                if partition == "train":
                    report.add("error", "missing_label", f"training case {case.case_id} has no label")
                continue
            _validate_case(case, report)

    manifest_path = task_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        report.add("warning", "no_manifest", "manifest.json is missing; hashes not verified", manifest_path)
        return report
    try:
        manifest = Manifest.load(manifest_path)
    except ParseError as exc:
        report.add("error", "manifest", str(exc), manifest_path)
        return report
    listed = set()
    for entry in manifest.files:
        listed.add(entry.path)
        p = task_dir / entry.path
        if not p.is_file():
            report.add("error", "missing_file", f"{entry.path} listed in manifest but absent", p)
            continue
        try:
            digest = imagecore.payload_sha256(p)
        except SegPipeError as exc:
            report.add("error", "hash_mismatch", f"{entry.path}: hash mismatch (unreadable: {exc})", p)
            continue
        if digest != entry.sha256:
            report.add("error", "hash_mismatch", f"{entry.path}: hash mismatch", p)
    for rel in sorted(set(present) - listed):
        report.add("warning", "unlisted_file", f"{rel} is not in the manifest", present[rel])
    return report


def _validate_case(case: CaseFiles, report: ValidationReport) -> None:
    try:
        geoms = [imagecore.read_geometry(p) for p in case.images]
    except SegPipeError as exc:
        report.add("error", "unreadable", f"case {case.case_id}: {exc}")
        return
    shape0, sp0 = geoms[0]
    for (shape, sp), p in zip(geoms[1:], case.images[1:]):
        if shape != shape0:
            report.add("error", "geometry", f"case {case.case_id}: modality shape {shape} != {shape0}", p)
        elif any(abs(a - b) > SPACING_TOL for a, b in zip(sp, sp0)):
            report.add("error", "spacing", f"case {case.case_id}: modality spacing {sp} != {sp0}", p)
    if case.label.suffix == ".txt":
        try:
            read_class_label(case.label)
        except SegPipeError as exc:
            report.add("error", "class_label", str(exc), case.label)
        return
    try:
        lbl = imagecore.read_volume(case.label)
    except SegPipeError as exc:
        report.add("error", "unreadable", f"case {case.case_id}: {exc}", case.label)
        return
    if lbl.shape != shape0:
        report.add("error", "geometry", f"case {case.case_id}: label shape {lbl.shape} != image shape {shape0}", case.label)
    elif any(abs(a - b) > SPACING_TOL for a, b in zip(lbl.spacing, sp0)):
        report.add("error", "spacing", f"case {case.case_id}: label spacing {lbl.spacing} != {sp0}", case.label)
    if not np.array_equal(lbl.data, np.rint(lbl.data)):
        report.add("error", "non_integer_label", f"case {case.case_id}: non-integer label values", case.label)
    elif lbl.data.size and lbl.data.min() < 0:
        report.add("error", "negative_label", f"case {case.case_id}: negative label values", case.label)


def read_class_label(path, text: Optional[str] = None) -> int:
    """Parse a classification label file holding a single non-negative integer."""
    if text is None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        value = int(text.strip())
    except ValueError as exc:
        raise ParseError(f"{path}: expected a single integer class label, got {text.strip()!r}") from exc
    if value < 0:
        raise DomainError(f"{path}: class label must be >= 0, got {value}")
    return value
