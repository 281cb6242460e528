"""Synthetic bright-vs-dark patch dataset for desk-scale runs.

Positives carry a bright square, negatives a dark one, on a noisy mid-grey
background.  The patch always sits inside the central 224x224 crop.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from PIL import Image

SIZE = 256


def toy_image(rng, positive, size=SIZE, patch=80):
    img = rng.integers(90, 150, size=(size, size, 3)).astype(np.uint8)
    lo, hi = 32, size - 32 - patch
    y, x = rng.integers(lo, hi + 1, size=2)
    value = 235 if positive else 20
    img[y : y + patch, x : x + patch] = value
    return img


def toy_images(n=64, seed=0, positive_fraction=0.5):
    """``n`` (image_id, label, raster) triples with positives spread evenly through the list."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = int(math.floor((i + 1) * positive_fraction) > math.floor(i * positive_fraction))
        out.append((f"toy_{i:04d}", label, toy_image(rng, bool(label))))
    return out


def write_toy_dataset(root, n=64, seed=0, test_fraction=0.25, positive_fraction=0.5):
    """Write PNGs plus ``manifest.json``; the last ``test_fraction`` of images is pre-tagged ``test``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    images = toy_images(n, seed, positive_fraction)
    n_test = int(round(n * test_fraction))
    entries = []
    for i, (image_id, label, img) in enumerate(images):
        rel = f"images/{image_id}.png"
        Image.fromarray(img).save(root / rel, format="PNG")
        entry = {"id": image_id, "path": rel, "source": "synthetic", "label": label}
        if i >= n - n_test:
            entry["split"] = "test"
        entries.append(entry)
    path = root / "manifest.json"
    path.write_text(json.dumps({"images": entries}, indent=2) + "\n", encoding="utf-8")
    return path
