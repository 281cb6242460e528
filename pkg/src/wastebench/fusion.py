"""Late fusion: align per-model prediction files by filename and average probabilities."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .errors import FilenameMismatch, LabelConflict, NormalizationViolation, ValidationError
from .metrics import MetricsReport, evaluate
from .predictions import NORM_TOL, PredictionRecord, read_predictions, write_predictions

logger = logging.getLogger(__name__)

# the three-file recipe: the parallel ensemble plus its two members
THREE_MODEL_PRESET = ("parallel_ensemble", "mobilevit_xs", "vit_tiny_r_s16_p8_224")


def load_prediction_file(path) -> list[PredictionRecord]:
    return read_predictions(path)


@dataclass(frozen=True)
class AlignedPredictions:
    filenames: tuple
    per_model: dict  # model name -> tuple of (p_negative, p_positive), aligned to filenames
    labels: tuple | None = None

    def __post_init__(self):
        n = len(self.filenames)
        for name, pairs in self.per_model.items():
            if len(pairs) != n:
                raise ValidationError(f"model {name!r} has {len(pairs)} rows, expected {n}")
            for fname, (pn, pp) in zip(self.filenames, pairs):
                if abs(pn + pp - 1.0) > NORM_TOL + 1e-12:
                    raise NormalizationViolation(f"{name}/{fname}: probabilities sum to {pn + pp}")
        if self.labels is not None and len(self.labels) != n:
            raise ValidationError("label list length differs from filenames")

    @property
    def model_names(self):
        return tuple(self.per_model)


def align(files, model_names, allow_intersection=False) -> AlignedPredictions:
    """Line up record lists by filename.

    Filename sets must match exactly unless ``allow_intersection`` is set, in
    which case rows missing from any model are dropped and logged.
    """
    files = [list(f) for f in files]
    model_names = list(model_names)
    if len(files) < 2:
        raise ValidationError("fusion needs at least two prediction sets")
    if len(model_names) != len(files):
        raise ValidationError("one model name per prediction set is required")
    if len(set(model_names)) != len(model_names):
        raise ValidationError(f"model names must be distinct: {model_names}")

    tables = [{r.filename: r for r in recs} for recs in files]
    sets = [set(t) for t in tables]
    union = set().union(*sets)
    common = set.intersection(*sets)
    if union != common:
        dropped = union - common
        if not allow_intersection:
            raise FilenameMismatch(dropped)
        logger.warning("fusion: dropping %d filename(s) not present in every file: %s",
                       len(dropped), ", ".join(sorted(dropped)))
    filenames = tuple(sorted(common))

    labels = []
    any_label = False
    for fname in filenames:
        label, owner = None, None
        for name, table in zip(model_names, tables):
            lab = table[fname].true_label
            if lab is None:
                continue
            any_label = True
            if label is None:
                label, owner = lab, name
            elif lab != label:
                raise LabelConflict(f"{fname}: {owner} says {int(label)}, {name} says {int(lab)}")
        labels.append(label)

    per_model = {
        name: tuple((table[f].p_negative, table[f].p_positive) for f in filenames)
        for name, table in zip(model_names, tables)
    }
    return AlignedPredictions(filenames, per_model, tuple(labels) if any_label else None)


def _mean(values):
    # exact rational mean, rounded once: order-free and always inside [min, max]
    return float(sum(map(Fraction, values)) / len(values))


def average_fuse(aligned: AlignedPredictions) -> list[PredictionRecord]:
    """Unweighted mean of each class probability across models.

    The mean is computed exactly and rounded once, so model order never matters.
    """
    cols = list(aligned.per_model.values())
    out = []
    for i, fname in enumerate(aligned.filenames):
        p_neg = _mean([c[i][0] for c in cols])
        p_pos = _mean([c[i][1] for c in cols])
        s = p_neg + p_pos
        if abs(s - 1.0) > 1e-9:
            p_neg, p_pos = p_neg / s, p_pos / s
        label = aligned.labels[i] if aligned.labels is not None else None
        out.append(PredictionRecord(fname, p_neg, p_pos, label))
    return out


def evaluate_fused(fused) -> MetricsReport:
    return evaluate(fused)


def write_fusion_manifest(path, inputs, model_names, output, allow_intersection=False):
    doc = {
        "method": "arithmetic_mean",
        "inputs": [{"model": name, "file": str(p)} for name, p in zip(model_names, inputs)],
        "output": str(output),
        "allow_intersection": bool(allow_intersection),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def fuse_files(paths, model_names=None, output=None, allow_intersection=False):
    """Load, align and average prediction files; optionally write the fused CSV."""
    paths = [Path(p) for p in paths]
    if model_names is None:
        model_names = [p.stem if p.stem not in ("predictions", "fused") else p.parent.as_posix() for p in paths]
    files = [load_prediction_file(p) for p in paths]
    fused = average_fuse(align(files, model_names, allow_intersection))
    if output is not None:
        write_predictions(fused, output)
    return fused
