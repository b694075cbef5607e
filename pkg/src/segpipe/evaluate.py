"""Count-based segmentation metrics and the results file."""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, imagecore
from .errors import DomainError, GeometryError, MissingCase, SegPipeError
from .taskconv import atomic_write_text, canonical_json

RESULTS_FORMAT_VERSION = 1
METRICS = ("dice", "jaccard", "sensitivity", "precision", "volume_similarity")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion_counts(pred: np.ndarray, gt: np.ndarray, label: int) -> ConfusionCounts:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise GeometryError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    p = pred == label
    g = gt == label
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p)) - tp
    fn = int(np.count_nonzero(g)) - tp
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def metrics_from_counts(c: ConfusionCounts) -> dict:
    """Metric set for one (case, label); ``absent_in_both`` flags empty pred and gt."""
    tp, fp, fn = c.tp, c.fp, c.fn
    return {
        "dice": _ratio(2 * tp, 2 * tp + fp + fn),
        "jaccard": _ratio(tp, tp + fp + fn),
        "sensitivity": _ratio(tp, tp + fn),
        "precision": _ratio(tp, tp + fp),
        "volume_similarity": 1.0 - (abs(fp - fn) / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0),
        "absent_in_both": tp + fp + fn == 0,
    }


def aggregate(values: Sequence[float]) -> dict:
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        return {"mean": None, "std": None, "median": None, "n": 0}
    return {"mean": float(a.mean()), "std": float(a.std()), "median": float(np.median(a)), "n": int(a.size)}


def _aggregates(cases: dict, labels: Sequence[int]) -> dict:
    out = {}
    for lab in labels:
        key = str(lab)
        out[key] = {m: aggregate([cases[c][key][m] for c in sorted(cases)]) for m in METRICS}
    return out


def _case_id(name: str) -> Optional[str]:
    if not name.endswith(".nii.gz"):
        return None
    stem = name[: -len(".nii.gz")]
    return stem[len("case_"):] if stem.startswith("case_") else stem


def _listing(folder: Path) -> dict:
    if not folder.is_dir():
        raise MissingCase(f"{folder} is not a directory")
    return {cid: p for p in sorted(folder.iterdir()) if (cid := _case_id(p.name)) is not None}


def _dir_hash(files: dict) -> str:
    h = hashlib.sha256()
    for cid in sorted(files):
        h.update(f"{files[cid].name}\0{imagecore.payload_sha256(files[cid])}\n".encode())
    return h.hexdigest()


def evaluate_cases(pairs: dict, labels: Sequence[int]) -> dict:
    """``pairs`` maps case id to ``(pred, gt)`` label arrays; returns per-case metrics."""
    cases = {}
    for cid in sorted(pairs):
        pred, gt = pairs[cid]
        if np.shape(pred) != np.shape(gt):
            raise GeometryError(f"case {cid}: prediction shape {np.shape(pred)} != ground truth {np.shape(gt)}")
        entry = {}
        for lab in labels:
            c = confusion_counts(pred, gt, lab)
            entry[str(lab)] = {**metrics_from_counts(c), "counts": c.to_dict()}
        cases[cid] = entry
    return cases


def build_results(cases: dict, labels: Sequence[int], metadata: dict) -> dict:
    return {
        "format_version": RESULTS_FORMAT_VERSION,
        "metadata": {**metadata, "labels": [int(x) for x in labels], "tool_version": __version__},
        "cases": cases,
        "aggregate": _aggregates(cases, labels),
    }


def check_consistency(results: dict) -> None:
    """Recompute aggregates from the per-case table; raise if they disagree."""
    labels = results["metadata"]["labels"]
    if _aggregates(results["cases"], labels) != results["aggregate"]:
        raise SegPipeError("results aggregates do not match the per-case table")


def results_csv(results: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "label", *METRICS, "absent_in_both", "tp", "fp", "fn", "tn"])
    for cid in sorted(results["cases"]):
        for lab, m in sorted(results["cases"][cid].items(), key=lambda kv: int(kv[0])):
            c = m["counts"]
            w.writerow([cid, lab, *[repr(m[k]) for k in METRICS], int(m["absent_in_both"]), c["tp"], c["fp"], c["fn"], c["tn"]])
    return buf.getvalue()


def evaluate_folder(pred_dir, gt_dir, labels: Sequence[int], out_path=None, csv_path=None) -> dict:
    """Evaluate every ``.nii.gz`` prediction against its same-named ground truth."""
    labels = [int(x) for x in labels]
    if not labels:
        raise DomainError("need at least one label to evaluate")
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds, gts = _listing(pred_dir), _listing(gt_dir)
    missing_gt = sorted(set(preds) - set(gts))
    if missing_gt:
        raise MissingCase(f"no ground truth for case(s): {', '.join(missing_gt)}")
    missing_pred = sorted(set(gts) - set(preds))
    if missing_pred:
        raise MissingCase(f"no prediction for case(s): {', '.join(missing_pred)}")
    if not preds:
        raise MissingCase(f"{pred_dir} contains no predictions")
    pairs = {}
    for cid in sorted(preds):
        p = imagecore.read_volume(preds[cid])
        g = imagecore.read_volume(gts[cid])
        if p.shape != g.shape:
            raise GeometryError(f"case {cid}: prediction shape {p.shape} != ground truth {g.shape}")
        pairs[cid] = (imagecore.as_label_map(p.data[0]), imagecore.as_label_map(g.data[0]))
    cases = evaluate_cases(pairs, labels)
    results = build_results(
        cases,
        labels,
        {"prediction_dir_hash": _dir_hash(preds), "gt_dir_hash": _dir_hash(gts), "case_count": len(cases)},
    )
    check_consistency(results)
    if out_path is not None:
        atomic_write_text(Path(out_path), canonical_json(results))
    if csv_path is not None:
        atomic_write_text(Path(csv_path), results_csv(results))
    return results


def mean_foreground_dice(results: dict) -> float:
    """Mean over cases and non-zero labels of the per-case Dice."""
    vals = [m["dice"] for c in results["cases"].values() for lab, m in c.items() if lab != "0"]
    return float(np.mean(vals)) if vals else float("nan")
