"""Dataset manifests: ingest, label corrections, stratified splits, folder layout."""

from __future__ import annotations

import enum
import filecmp
import json
import logging
import os
import random
import shutil
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from .errors import (
    DuplicateId,
    EmptyManifest,
    IOFailure,
    MissingFile,
    MissingImageFile,
    SchemaViolation,
    StaleCorrection,
    UnknownId,
    ValidationError,
)

logger = logging.getLogger(__name__)


class Label(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1

    @property
    def folder(self):
        return self.name.lower()


class Source(str, enum.Enum):
    AGEA = "AGEA"
    WORLDVIEW3 = "WorldView3"
    GOOGLE_EARTH = "GoogleEarth"
    SYNTHETIC = "synthetic"
    UNKNOWN = "unknown"


class Split(str, enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"
    UNASSIGNED = "unassigned"


# spellings seen in AerialWaste-style metadata
_SOURCE_ALIASES = {
    "agea": Source.AGEA,
    "worldview3": Source.WORLDVIEW3,
    "worldview-3": Source.WORLDVIEW3,
    "wv3": Source.WORLDVIEW3,
    "googleearth": Source.GOOGLE_EARTH,
    "google earth": Source.GOOGLE_EARTH,
    "google_earth": Source.GOOGLE_EARTH,
    "ge": Source.GOOGLE_EARTH,
    "synthetic": Source.SYNTHETIC,
    "unknown": Source.UNKNOWN,
}


def parse_source(value):
    if value is None:
        return Source.UNKNOWN
    try:
        return _SOURCE_ALIASES[str(value).strip().lower()]
    except KeyError:
        raise ValueError(f"unrecognised source {value!r}") from None


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: str
    source: Source = Source.UNKNOWN
    label: Label = Label.NEGATIVE
    split: Split = Split.UNASSIGNED

    def to_json(self):
        out = {"id": self.image_id, "path": self.path, "source": self.source.value, "label": int(self.label)}
        if self.split is not Split.UNASSIGNED:
            out["split"] = self.split.value
        return out


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...] = ()
    audit: tuple[dict, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for rec in self.records:
            if rec.image_id in seen:
                raise DuplicateId(f"duplicate image id {rec.image_id!r}")
            seen.add(rec.image_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def class_counts(self) -> dict[Label, int]:
        counts = Counter(r.label for r in self.records)
        return {lab: counts.get(lab, 0) for lab in Label}

    @property
    def source_counts(self) -> dict[Source, int]:
        counts = Counter(r.source for r in self.records)
        return {src: counts[src] for src in Source if counts.get(src)}

    @property
    def split_counts(self) -> dict[Split, int]:
        counts = Counter(r.split for r in self.records)
        return {s: counts.get(s, 0) for s in Split}

    def by_id(self):
        return {r.image_id: r for r in self.records}

    def with_split(self, split):
        return DatasetManifest([r for r in self.records if r.split is Split(split)])

    def assign(self, plan: "SplitPlan"):
        """Return a copy whose records carry the splits from ``plan``."""
        return DatasetManifest([replace(r, split=Split(plan.assignments[r.image_id])) for r in self.records])

    def to_json(self):
        return {"images": [r.to_json() for r in self.records]}

    def dumps(self):
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _record_from_entry(idx, entry):
    if not isinstance(entry, dict):
        raise SchemaViolation(f"images[{idx}]: entry must be an object")
    for key in ("id", "path", "label"):
        if key not in entry:
            raise SchemaViolation(f"images[{idx}]: missing field {key!r}")
    image_id = entry["id"]
    if not isinstance(image_id, str) or not image_id:
        raise SchemaViolation(f"images[{idx}] field 'id': expected non-empty string")
    if not isinstance(entry["path"], str) or not entry["path"]:
        raise SchemaViolation(f"images[{idx}] (id={image_id}) field 'path': expected non-empty string")
    label = entry["label"]
    if isinstance(label, bool) or label not in (0, 1):
        raise SchemaViolation(f"images[{idx}] (id={image_id}) field 'label': expected 0 or 1, got {label!r}")
    try:
        source = parse_source(entry.get("source"))
    except ValueError as exc:
        raise SchemaViolation(f"images[{idx}] (id={image_id}) field 'source': {exc}") from None
    split = entry.get("split", Split.UNASSIGNED.value)
    try:
        split = Split(split)
    except ValueError:
        raise SchemaViolation(f"images[{idx}] (id={image_id}) field 'split': unknown split {split!r}") from None
    return ImageRecord(image_id, entry["path"], source, Label(label), split)


def manifest_from_json(doc) -> DatasetManifest:
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise SchemaViolation("manifest must be an object with an 'images' list")
    records = [_record_from_entry(i, e) for i, e in enumerate(doc["images"])]
    return DatasetManifest(records)


def _read_json(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"{path}: invalid JSON ({exc})") from None


def parse_manifest(path) -> DatasetManifest:
    return manifest_from_json(_read_json(path))


def adapt_aerialwaste(doc, source_field="source"):
    """Map AerialWaste COCO-style metadata into the manifest schema.

    AerialWaste marks positives with ``is_candidate_location``; the image
    file comes from ``file_name``.  Entries already in manifest form pass
    through untouched.
    """
    images = []
    for img in doc.get("images", []):
        if "path" in img and "label" in img:
            images.append(img)
            continue
        label = img.get("is_candidate_location")
        if label is None:
            label = img.get("label")
        entry = {
            "id": str(img.get("id", Path(img.get("file_name", "")).stem)),
            "path": img.get("file_name"),
            "label": int(bool(label)),
        }
        if img.get(source_field) is not None:
            entry["source"] = img[source_field]
        images.append(entry)
    return {"images": images}


# --- corrections -----------------------------------------------------------


@dataclass(frozen=True)
class LabelCorrection:
    image_id: str
    old_label: Label
    new_label: Label
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "old_label", Label(self.old_label))
        object.__setattr__(self, "new_label", Label(self.new_label))
        if self.old_label == self.new_label:
            raise ValidationError(f"correction for {self.image_id!r} does not change the label")


def load_corrections(path) -> list[LabelCorrection]:
    doc = _read_json(path)
    if not isinstance(doc, list):
        raise SchemaViolation("corrections file must be a JSON list")
    out = []
    for i, row in enumerate(doc):
        try:
            out.append(LabelCorrection(row["id"], row["old_label"], row["new_label"], row.get("note", "")))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaViolation(f"corrections[{i}]: {exc}") from None
    return out


def apply_corrections(manifest: DatasetManifest, corrections: Iterable[LabelCorrection]) -> DatasetManifest:
    """Relabel records; the returned manifest's ``audit`` has one row per correction."""
    records = {r.image_id: r for r in manifest.records}
    audit = []
    for c in corrections:
        rec = records.get(c.image_id)
        if rec is None:
            raise UnknownId(f"correction refers to unknown image id {c.image_id!r}")
        if rec.label != c.old_label:
            raise StaleCorrection(
                f"{c.image_id}: correction expects label {int(c.old_label)} but manifest has {int(rec.label)}"
            )
        records[c.image_id] = replace(rec, label=c.new_label)
        audit.append({"id": c.image_id, "old_label": int(c.old_label), "new_label": int(c.new_label), "note": c.note})
    new = DatasetManifest([records[r.image_id] for r in manifest.records], audit=manifest.audit + tuple(audit))
    return new


# --- splitting -------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    assignments: dict
    validation_fraction: float
    seed: int
    flags: tuple = field(default=(), compare=False)

    def counts(self):
        c = Counter(self.assignments.values())
        return {s.value: c.get(s.value, 0) for s in (Split.TRAIN, Split.VALIDATION, Split.TEST)}

    def to_json(self):
        return {
            "seed": self.seed,
            "fraction": self.validation_fraction,
            "assignments": dict(sorted(self.assignments.items())),
        }

    @classmethod
    def from_json(cls, doc):
        return cls(dict(doc["assignments"]), float(doc["fraction"]), int(doc["seed"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_json(_read_json(path))


def _allocate(total, sizes):
    """Largest-remainder apportionment of ``total`` across classes of ``sizes``."""
    n = sum(sizes.values())
    exact = {k: total * v / n for k, v in sizes.items()}
    alloc = {k: int(x) for k, x in exact.items()}
    short = total - sum(alloc.values())
    by_remainder = sorted(sizes, key=lambda k: (-(exact[k] - alloc[k]), k))
    for k in by_remainder[:short]:
        alloc[k] += 1
    return alloc


def make_splits(manifest: DatasetManifest, validation_fraction: float, seed: int) -> SplitPlan:
    """Stratified train/validation split; records already tagged ``test`` stay put.

    The overall validation size is ``round(fraction * N)`` over the splittable
    records, apportioned across labels so each class lands within one record
    of ``fraction * class_count``.
    """
    if not 0.0 < validation_fraction < 1.0:
        raise ValidationError(f"validation fraction must lie in (0, 1), got {validation_fraction}")
    if len(manifest) == 0:
        raise EmptyManifest("cannot split an empty manifest")

    assignments = {}
    pools = {lab: [] for lab in Label}
    for rec in manifest.records:
        if rec.split is Split.TEST:
            assignments[rec.image_id] = Split.TEST.value
        else:
            pools[rec.label].append(rec.image_id)

    flags = []
    for lab, ids in pools.items():
        if not ids:
            flags.append(f"degenerate class: no splittable {lab.folder} records")
            logger.warning("split: class %s has no splittable records", lab.folder)

    sizes = {lab: len(ids) for lab, ids in pools.items() if ids}
    n = sum(sizes.values())
    total_val = int(validation_fraction * n + 0.5) if n else 0
    quota = _allocate(total_val, sizes) if n else {}

    rng = random.Random(seed)
    for lab in Label:
        ids = sorted(pools[lab])
        rng.shuffle(ids)
        k = quota.get(lab, 0)
        for i, image_id in enumerate(ids):
            assignments[image_id] = Split.VALIDATION.value if i < k else Split.TRAIN.value

    ordered = {r.image_id: assignments[r.image_id] for r in manifest.records}
    return SplitPlan(ordered, validation_fraction, seed, tuple(flags))


# --- on-disk layout --------------------------------------------------------


def target_name(rec: ImageRecord):
    return rec.image_id + (Path(rec.path).suffix or ".png")


def materialize(manifest: DatasetManifest, plan: SplitPlan, root, source_root=".", mode="copy"):
    """Populate ``root/{train,validation,test}/{negative,positive}/``.

    All referenced files are checked before anything is written.  Files
    already present with identical content are left alone, so re-running on
    an unchanged tree is a no-op.  Returns per-folder counts read back from
    disk.
    """
    if mode not in ("copy", "link"):
        raise ValidationError(f"unknown materialize mode {mode!r}")
    root = Path(root)
    source_root = Path(source_root)
    missing = []
    for rec in manifest.records:
        if rec.image_id not in plan.assignments:
            raise ValidationError(f"split plan has no assignment for {rec.image_id!r}")
        src = source_root / rec.path
        if not src.is_file():
            missing.append(str(rec.path))
    if missing:
        raise MissingImageFile(missing)

    try:
        for split in (Split.TRAIN, Split.VALIDATION, Split.TEST):
            for lab in Label:
                (root / split.value / lab.folder).mkdir(parents=True, exist_ok=True)
        for rec in manifest.records:
            src = (source_root / rec.path).resolve()
            dst = root / plan.assignments[rec.image_id] / rec.label.folder / target_name(rec)
            if dst.exists() or dst.is_symlink():
                if mode == "link" and dst.is_symlink() and Path(os.readlink(dst)) == src:
                    continue
                if mode == "copy" and not dst.is_symlink() and filecmp.cmp(src, dst, shallow=False):
                    continue
                dst.unlink()
            if mode == "link":
                dst.symlink_to(src)
            else:
                shutil.copyfile(src, dst)
    except OSError as exc:
        raise IOFailure(f"materialize failed: {exc}") from exc
    return folder_summary(root)


def folder_summary(root):
    root = Path(root)
    summary = {}
    for split in (Split.TRAIN, Split.VALIDATION, Split.TEST):
        summary[split.value] = {}
        for lab in Label:
            d = root / split.value / lab.folder
            summary[split.value][lab.folder] = sum(1 for p in d.iterdir() if p.is_file()) if d.is_dir() else 0
    return summary


def summarize(manifest: DatasetManifest) -> dict:
    return {
        "total": len(manifest),
        "class": {lab.folder: n for lab, n in manifest.class_counts.items()},
        "source": {src.value: n for src, n in manifest.source_counts.items()},
        "split": {s.value: n for s, n in manifest.split_counts.items()},
    }


def format_summary(summary: dict) -> str:
    lines = [f"total images: {summary['total']}"]
    for section in ("class", "source", "split"):
        lines.append(f"{section}:")
        for key, n in summary[section].items():
            lines.append(f"  {key:<12} {n:>7}")
    return "\n".join(lines) + "\n"
