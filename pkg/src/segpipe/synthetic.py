"""Synthetic sphere datasets for smoke tests and benchmarks."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import imagecore


def sphere_case(rng: np.random.Generator, shape=(48, 48, 48), radius=(6.0, 12.0), intensity=3.0, noise=1.0):
    """One noisy volume with a bright sphere; returns ``(image, label)``."""
    shape = tuple(shape)
    r = rng.uniform(*radius)
    center = [rng.uniform(r + 1, n - r - 2) for n in shape]
    grid = np.indices(shape, dtype=np.float64)
    dist2 = sum((g - c) ** 2 for g, c in zip(grid, center))
    label = (dist2 <= r * r).astype(np.uint8)
    image = rng.normal(0.0, noise, shape) + intensity * label
    return image.astype(np.float32), label


def write_sphere_source(out_dir, n_cases: int = 20, seed: int = 0, shape=(48, 48, 48), spacing=(1.0, 1.0, 1.0), **kw) -> Path:
    """Write ``n_cases`` sphere cases plus a ``source.json`` usable by task conversion."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n_cases):
        img, lab = sphere_case(rng, shape, **kw)
        cid = f"{i:03d}"
        imagecore.write_volume(imagecore.Volume(img[None], spacing), out_dir / f"img_{cid}.nii.gz", "float32")
        imagecore.write_volume(imagecore.Volume(lab[None], spacing), out_dir / f"seg_{cid}.nii.gz", "uint8")
        cases.append({"id": cid, "images": [f"img_{cid}.nii.gz"], "label": f"seg_{cid}.nii.gz"})
    path = out_dir / "source.json"
    path.write_text(json.dumps({"description": "synthetic spheres", "cases": cases}, indent=2) + "\n", encoding="utf-8")
    return path
