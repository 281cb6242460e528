"""Image standardisation, seeded augmentation, class balancing and normalisation."""

from __future__ import annotations

import hashlib
import json
import math
import random
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import EmptyClass, InvalidCropWindow, UndecodableImage, ValidationError
from .manifest import DatasetManifest, ImageRecord, Label

FRAME = 256
INPUT_SIZE = 224


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple
    std: tuple

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValidationError("normalization stats need exactly 3 channels")
        if any(not s > 0 for s in self.std):
            raise ValidationError(f"std components must be > 0, got {self.std}")


# --- standardisation ---------------------------------------------------------


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            return np.asarray(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise UndecodableImage(f"{path}: {exc}") from None


def standardize(image) -> np.ndarray:
    """Resize any 1- or 3-channel raster to 256x256x3 uint8 (direct resize, no letterbox)."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise UndecodableImage(f"expected HxW, HxWx1 or HxWx3 raster, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    if arr.shape[:2] == (FRAME, FRAME):
        return arr.copy()
    return np.asarray(Image.fromarray(arr).resize((FRAME, FRAME), Image.BILINEAR))


def center_crop(image, size=INPUT_SIZE):
    h, w = image.shape[:2]
    if h < size or w < size:
        image = np.asarray(Image.fromarray(np.asarray(image, dtype=np.uint8)).resize((size, size), Image.BILINEAR))
        h, w = size, size
    top = (h - size) // 2
    left = (w - size) // 2
    return image[top : top + size, left : left + size]


def model_input(image, stats: NormalizationStats) -> np.ndarray:
    """Centre-crop to 224 and map each channel to ``(pixel/255 - mean) / std``.

    Returns float32 HxWx3.  Float inputs are accepted as raw pixel values.
    """
    crop = center_crop(np.asarray(image))
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    out = (crop.astype(np.float64) / 255.0 - mean) / std
    return out.astype(np.float32)


def denormalize(array, stats: NormalizationStats) -> np.ndarray:
    """Inverse of the normalisation step; returns float pixel values in [0, 255]."""
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    return (np.asarray(array, dtype=np.float64) * std + mean) * 255.0


# --- augmentation ------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationRanges:
    rotation_degrees: float = 30.0
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    brightness: tuple = (0.8, 1.2)
    contrast: tuple = (0.8, 1.2)
    saturation: tuple = (0.8, 1.2)
    crop_area: tuple = (0.8, 1.0)


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_degrees: float = 0.0
    hflip: bool = False
    vflip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    crop: tuple = (0, 0, FRAME, FRAME)  # x, y, w, h
    seed_tuple: tuple = field(default=(), compare=False)

    @classmethod
    def identity(cls):
        return cls()


def derive_key(global_seed, image_id, epoch) -> int:
    """Stable 64-bit key for one (seed, image, epoch) triple."""
    payload = f"{int(global_seed)}\x1f{image_id}\x1f{int(epoch)}".encode("utf-8")
    return struct.unpack("<Q", hashlib.blake2b(payload, digest_size=8).digest())[0]


def _generator(global_seed, image_id, epoch):
    return np.random.Generator(np.random.Philox(key=derive_key(global_seed, image_id, epoch)))


def sample_augmentation(global_seed, image_id, epoch, ranges: AugmentationRanges | None = None) -> AugmentationSpec:
    r = ranges or AugmentationRanges()
    g = _generator(global_seed, image_id, epoch)
    rot = float(g.uniform(-r.rotation_degrees, r.rotation_degrees))
    hflip = bool(g.random() < r.hflip_p)
    vflip = bool(g.random() < r.vflip_p)
    b = float(g.uniform(*r.brightness))
    c = float(g.uniform(*r.contrast))
    s = float(g.uniform(*r.saturation))
    area = float(g.uniform(*r.crop_area))
    side = min(FRAME, max(1, int(round(FRAME * math.sqrt(area)))))
    x = int(g.integers(0, FRAME - side + 1))
    y = int(g.integers(0, FRAME - side + 1))
    return AugmentationSpec(rot, hflip, vflip, b, c, s, (x, y, side, side), (int(global_seed), image_id, int(epoch)))


def _grayscale(img):
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def apply_augmentation(image, spec: AugmentationSpec) -> np.ndarray:
    """rotate -> flip -> colour jitter -> crop -> resize back to the input frame."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    x, y, cw, ch = spec.crop
    if cw <= 0 or ch <= 0 or x < 0 or y < 0 or x + cw > w or y + ch > h:
        raise InvalidCropWindow(f"crop {spec.crop} outside {w}x{h} frame")
    dtype = img.dtype
    out = img

    angle = spec.rotation_degrees % 360.0
    if angle:
        if angle % 90.0 == 0.0:
            # counter-clockwise, exact for right angles
            out = np.rot90(out, k=int(angle // 90), axes=(0, 1))
        else:
            out = np.asarray(Image.fromarray(out).rotate(angle, resample=Image.BILINEAR, fillcolor=(0, 0, 0)))
    if spec.hflip:
        out = out[:, ::-1]
    if spec.vflip:
        out = out[::-1, :]

    if (spec.brightness, spec.contrast, spec.saturation) != (1.0, 1.0, 1.0):
        f = out.astype(np.float64)
        if spec.brightness != 1.0:
            f = np.clip(f * spec.brightness, 0, 255)
        if spec.contrast != 1.0:
            mean = _grayscale(f).mean()
            f = np.clip(mean + spec.contrast * (f - mean), 0, 255)
        if spec.saturation != 1.0:
            gray = _grayscale(f)[..., None]
            f = np.clip(gray + spec.saturation * (f - gray), 0, 255)
        out = np.rint(f).astype(dtype)

    if (x, y, cw, ch) != (0, 0, w, h):
        out = np.ascontiguousarray(out[y : y + ch, x : x + cw])
        out = np.asarray(Image.fromarray(out).resize((w, h), Image.BILINEAR))
    return np.ascontiguousarray(out)


# --- balancing ---------------------------------------------------------------


def augmented_id(source_id, k):
    return f"{source_id}__aug{k}"


def source_of(image_id):
    """Original id an augmented copy was derived from (itself for originals)."""
    return image_id.split("__aug", 1)[0]


@dataclass(frozen=True)
class BalancePlan:
    minority_label: Label
    copies_per_source: dict
    target_count: int

    @property
    def total_copies(self):
        return sum(self.copies_per_source.values())

    def to_json(self):
        return {
            "minority": int(self.minority_label),
            "target": self.target_count,
            "copies": dict(sorted(self.copies_per_source.items())),
        }

    @classmethod
    def from_json(cls, doc):
        return cls(Label(doc["minority"]), {k: int(v) for k, v in doc["copies"].items()}, int(doc["target"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")


def balance(manifest: DatasetManifest, seed: int = 0) -> BalancePlan:
    """Schedule augmented copies of the minority class until both classes match.

    Copies are spread as evenly as possible; which sources get the extra
    copy when the deficit does not divide evenly is drawn with ``seed``.
    """
    counts = manifest.class_counts
    for lab, n in counts.items():
        if n == 0:
            raise EmptyClass(f"class {lab.folder} has no records; cannot balance")
    minority = min(Label, key=lambda lab: (counts[lab], -int(lab)))  # ties -> positive
    majority_count = max(counts.values())
    sources = sorted(r.image_id for r in manifest.records if r.label == minority)
    deficit = majority_count - len(sources)
    base, extra = divmod(deficit, len(sources))
    lucky = set(random.Random(seed).sample(sources, extra))
    copies = {sid: base + (1 if sid in lucky else 0) for sid in sources}
    return BalancePlan(minority, copies, majority_count)


def planned_records(manifest: DatasetManifest, plan: BalancePlan, folder="augmented") -> list[ImageRecord]:
    """Records for the augmented copies a plan would create (no files touched)."""
    by_id = manifest.by_id()
    out = []
    for sid, n in sorted(plan.copies_per_source.items()):
        src = by_id[sid]
        for k in range(n):
            aid = augmented_id(sid, k)
            out.append(replace(src, image_id=aid, path=f"{folder}/{aid}.png"))
    return out


def execute_balance(manifest: DatasetManifest, plan: BalancePlan, source_root, out_root, global_seed=0,
                    ranges: AugmentationRanges | None = None, folder="augmented") -> DatasetManifest:
    """Write augmented PNG copies under ``out_root/folder`` and return the balanced manifest.

    Each copy's transform is keyed by (global_seed, copy id, epoch 0), so the
    output depends only on the plan and the seed.
    """
    new = planned_records(manifest, plan, folder)
    by_id = manifest.by_id()
    out_dir = Path(out_root) / folder
    out_dir.mkdir(parents=True, exist_ok=True)
    for rec in new:
        src = by_id[source_of(rec.image_id)]
        img = standardize(load_image(Path(source_root) / src.path))
        spec = sample_augmentation(global_seed, rec.image_id, 0, ranges)
        Image.fromarray(apply_augmentation(img, spec)).save(Path(out_root) / rec.path, format="PNG")
    return DatasetManifest(list(manifest.records) + new)


def online_spec(global_seed, image_id, epoch, ranges=None, enabled=True):
    """Per-epoch training transform; identity when augmentation is disabled."""
    if not enabled:
        return AugmentationSpec.identity()
    return sample_augmentation(global_seed, image_id, epoch, ranges)


__all__ = [
    "AugmentationRanges",
    "AugmentationSpec",
    "BalancePlan",
    "NormalizationStats",
    "apply_augmentation",
    "balance",
    "denormalize",
    "derive_key",
    "execute_balance",
    "load_image",
    "model_input",
    "planned_records",
    "sample_augmentation",
    "standardize",
]
