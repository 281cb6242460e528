"""Confusion counts, per-class and weighted metrics, ROC/AUC and baseline comparison.

Values are fractions in [0, 1] internally; reports print percentages with two
decimals.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from .errors import (
    DegenerateLabels,
    EmptyCounts,
    MissingLabel,
    SchemaViolation,
    UnknownModelName,
    ValidationError,
    ZeroSupport,
)
from .manifest import Label
from .predictions import PredictionRecord

METRIC_NAMES = ("accuracy", "precision", "sensitivity", "f1", "specificity")
METRIC_TITLES = ("Accuracy", "Precision", "Sensitivity", "F1 score", "Specificity")


def decide(record: PredictionRecord, tie_break: Label = Label.NEGATIVE) -> Label:
    """Argmax decision; exact ties go to ``tie_break``."""
    if record.p_positive > record.p_negative:
        return Label.POSITIVE
    if record.p_negative > record.p_positive:
        return Label.NEGATIVE
    return Label(tie_break)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValidationError("confusion counts must be nonnegative")

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


def confusion(predictions, reference: Label = Label.POSITIVE, tie_break: Label = Label.NEGATIVE) -> ConfusionCounts:
    reference = Label(reference)
    tp = tn = fp = fn = 0
    for rec in predictions:
        if rec.true_label is None:
            raise MissingLabel(f"{rec.filename}: no true label")
        pred_ref = decide(rec, tie_break) == reference
        true_ref = Label(rec.true_label) == reference
        if pred_ref and true_ref:
            tp += 1
        elif pred_ref:
            fp += 1
        elif true_ref:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, tn, fp, fn)


@dataclass(frozen=True)
class ClassMetrics:
    accuracy: float
    precision: float
    sensitivity: float
    specificity: float
    f1: float
    support: int
    reference_class: Label = Label.POSITIVE
    warnings: tuple = field(default=(), compare=False)

    def values(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}


@dataclass(frozen=True)
class WeightedMetrics:
    accuracy: float
    precision: float
    sensitivity: float
    specificity: float
    f1: float
    support: int = 0

    def values(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}


def _ratio(num, den, name, warnings):
    if den == 0:
        warnings.append(f"{name}: zero denominator, defined as 0")
        return 0.0
    return num / den


def class_metrics(counts: ConfusionCounts, reference: Label = Label.POSITIVE) -> ClassMetrics:
    """Accuracy, precision, sensitivity, specificity and F1 for one reference class."""
    if counts.total == 0:
        raise EmptyCounts("no samples in confusion counts")
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    warnings = []
    accuracy = (tp + tn) / counts.total
    precision = _ratio(tp, tp + fp, "precision", warnings)
    sensitivity = _ratio(tp, tp + fn, "sensitivity", warnings)
    specificity = _ratio(tn, tn + fp, "specificity", warnings)
    f1 = _ratio(2 * precision * sensitivity, precision + sensitivity, "f1", warnings)
    return ClassMetrics(accuracy, precision, sensitivity, specificity, f1, tp + fn, Label(reference), tuple(warnings))


def weighted_average(per_class) -> WeightedMetrics:
    per_class = list(per_class)
    total = sum(m.support for m in per_class)
    if total <= 0:
        raise ZeroSupport("weighted average needs positive total support")
    vals = {name: math.fsum(getattr(m, name) * m.support for m in per_class) / total for name in METRIC_NAMES}
    return WeightedMetrics(support=total, **vals)


@dataclass(frozen=True)
class MetricsReport:
    positive: ClassMetrics
    negative: ClassMetrics
    weighted: WeightedMetrics
    counts: ConfusionCounts

    def rows(self):
        return [("Positive", self.positive), ("Negative", self.negative), ("Weighted Average", self.weighted)]

    def to_json(self):
        out = {"counts_positive_reference": asdict(self.counts), "classes": {}}
        for name, m in self.rows():
            entry = {k: round(v * 100, 2) for k, v in m.values().items()}
            entry["support"] = m.support
            warns = getattr(m, "warnings", ())
            if warns:
                entry["warnings"] = list(warns)
            out["classes"][name] = entry
        return out

    def to_text(self):
        return format_table([(name, m.values()) for name, m in self.rows()], first="Class")


def evaluate(predictions, tie_break: Label = Label.NEGATIVE) -> MetricsReport:
    """Positive, negative and support-weighted metrics, shaped like the fusion results table."""
    predictions = list(predictions)
    pos_counts = confusion(predictions, Label.POSITIVE, tie_break)
    neg_counts = confusion(predictions, Label.NEGATIVE, tie_break)
    pos = class_metrics(pos_counts, Label.POSITIVE)
    neg = class_metrics(neg_counts, Label.NEGATIVE)
    return MetricsReport(pos, neg, weighted_average([pos, neg]), pos_counts)


def format_table(rows, first="Model"):
    """Aligned text table in percent, column order Accuracy, Precision, Sensitivity, F1, Specificity."""
    width = max([len(first)] + [len(name) for name, _ in rows]) + 2
    lines = [first.ljust(width) + "".join(t.rjust(13) for t in METRIC_TITLES)]
    for name, vals in rows:
        lines.append(name.ljust(width) + "".join(f"{vals[k] * 100:13.2f}" for k in METRIC_NAMES))
    return "\n".join(lines) + "\n"


# --- ROC -----------------------------------------------------------------------


@dataclass(frozen=True)
class RocCurve:
    fpr: tuple
    tpr: tuple
    thresholds: tuple
    averaging: str = "per_class"
    reference: Label | None = None

    @property
    def points(self):
        return list(zip(self.fpr, self.tpr))

    def to_csv(self):
        lines = ["threshold,fpr,tpr"]
        for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
            t = "" if t is None else ("inf" if t == math.inf else f"{t:.6f}")
            lines.append(f"{t},{f:.6f},{p:.6f}")
        return "\n".join(lines) + "\n"


def _roc_from_scores(scores, truths, averaging="per_class", reference=None) -> RocCurve:
    n_pos = sum(1 for t in truths if t)
    n_neg = len(truths) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("ROC needs at least one sample of each truth value")
    pairs = sorted(zip(scores, truths), key=lambda st: -st[0])
    fpr, tpr, thr = [0.0], [0.0], [math.inf]
    tp = fp = 0
    i = 0
    while i < len(pairs):
        s = pairs[i][0]
        while i < len(pairs) and pairs[i][0] == s:
            if pairs[i][1]:
                tp += 1
            else:
                fp += 1
            i += 1
        fpr.append(fp / n_neg)
        tpr.append(tp / n_pos)
        thr.append(float(s))
    return RocCurve(tuple(fpr), tuple(tpr), tuple(thr), averaging, reference)


def _labelled(predictions):
    predictions = list(predictions)
    for rec in predictions:
        if rec.true_label is None:
            raise MissingLabel(f"{rec.filename}: no true label")
    return predictions


def roc_points(predictions, reference: Label = Label.POSITIVE) -> RocCurve:
    """Threshold sweep over the distinct reference-class probabilities (score >= threshold)."""
    reference = Label(reference)
    preds = _labelled(predictions)
    return _roc_from_scores([r.prob(reference) for r in preds], [r.true_label == reference for r in preds],
                            reference=reference)


def micro_roc(predictions) -> RocCurve:
    """Pool every (sample, class) decision into one sweep."""
    preds = _labelled(predictions)
    scores, truths = [], []
    for lab in Label:
        scores += [r.prob(lab) for r in preds]
        truths += [r.true_label == lab for r in preds]
    return _roc_from_scores(scores, truths, averaging="micro")


def macro_roc(curves) -> RocCurve:
    """Mean TPR of the per-class curves over the union of their FPR grids."""
    grid = sorted({f for c in curves for f in c.fpr})
    tpr = []
    for f in grid:
        tpr.append(math.fsum(_interp_max(f, c) for c in curves) / len(curves))
    return RocCurve(tuple(grid), tuple(tpr), tuple(None for _ in grid), "macro")


def _interp_max(x, curve):
    # staircase curves have vertical runs; take the top of the run at x
    best = None
    for i, f in enumerate(curve.fpr):
        if f == x:
            best = curve.tpr[i] if best is None else max(best, curve.tpr[i])
    if best is not None:
        return best
    for i in range(1, len(curve.fpr)):
        f0, f1 = curve.fpr[i - 1], curve.fpr[i]
        if f0 < x < f1:
            t0, t1 = curve.tpr[i - 1], curve.tpr[i]
            return t0 + (t1 - t0) * (x - f0) / (f1 - f0)
    return curve.tpr[-1]


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve."""
    area = math.fsum((curve.fpr[i] - curve.fpr[i - 1]) * (curve.tpr[i] + curve.tpr[i - 1]) / 2.0
                     for i in range(1, len(curve.fpr)))
    return min(1.0, max(0.0, area))


def micro_auc(predictions) -> float:
    return auc(micro_roc(predictions))


def macro_auc(predictions) -> float:
    preds = _labelled(predictions)
    return math.fsum(auc(roc_points(preds, lab)) for lab in Label) / len(Label)


@dataclass(frozen=True)
class RocReport:
    per_class: dict
    micro: RocCurve
    macro: RocCurve
    auc: dict

    def to_json(self):
        return {k: round(v, 6) for k, v in self.auc.items()}


def roc_report(predictions) -> RocReport:
    preds = _labelled(predictions)
    per_class = {lab.folder: roc_points(preds, lab) for lab in Label}
    micro = micro_roc(preds)
    macro = macro_roc(list(per_class.values()))
    areas = {f"{name}": auc(c) for name, c in per_class.items()}
    areas["micro"] = auc(micro)
    areas["macro"] = math.fsum(auc(c) for c in per_class.values()) / len(per_class)
    return RocReport(per_class, micro, macro, areas)


def write_roc(report: RocReport, out_dir, svg=True):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = dict(report.per_class, micro=report.micro, macro=report.macro)
    for name, curve in curves.items():
        (out_dir / f"roc_{name}.csv").write_text(curve.to_csv(), encoding="utf-8")
    if svg:
        (out_dir / "roc.svg").write_text(roc_svg(report), encoding="utf-8")


def roc_svg(report: RocReport, size=400, pad=50) -> str:
    """Minimal SVG ROC plot with the chance diagonal."""
    span = size - 2 * pad

    def xy(f, t):
        return f"{pad + f * span:.2f},{size - pad - t * span:.2f}"

    styles = {
        "positive": ("#1f77b4", "", "positive"),
        "negative": ("#2ca02c", "", "negative"),
        "micro": ("#e377c2", ' stroke-dasharray="6,3"', "micro-average"),
        "macro": ("#17becf", ' stroke-dasharray="2,3"', "macro-average"),
    }
    curves = dict(report.per_class, micro=report.micro, macro=report.macro)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#000"/>',
        f'<polyline points="{xy(0, 0)} {xy(1, 1)}" fill="none" stroke="#888" stroke-dasharray="4,4"/>',
        f'<text x="{size / 2}" y="{size - 15}" text-anchor="middle" font-size="12">False Positive Rate</text>',
        f'<text x="15" y="{size / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 15 {size / 2})">True Positive Rate</text>',
    ]
    for row, (name, curve) in enumerate(curves.items()):
        colour, dash, title = styles.get(name, ("#000", "", name))
        pts = " ".join(xy(f, t) for f, t in zip(curve.fpr, curve.tpr))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{colour}"{dash}/>')
        area = report.auc.get(name)
        label = f"{title} (AUC = {area:.2f})" if area is not None else title
        parts.append(f'<text x="{pad + span - 5}" y="{size - pad - 10 - 14 * row}" text-anchor="end" '
                     f'font-size="11" fill="{colour}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --- baselines -------------------------------------------------------------------

_BASELINE_SCHEMA = {
    "type": "object",
    "required": ["units", "tables"],
    "properties": {
        "units": {"const": "percent"},
        "tables": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["title", "rows"],
                "properties": {
                    "title": {"type": "string"},
                    "rows": {
                        "type": "object",
                        "additionalProperties": {
                            "type": "object",
                            "required": list(METRIC_NAMES),
                            "additionalProperties": False,
                            "properties": {k: {"type": "number", "minimum": 0, "maximum": 100} for k in METRIC_NAMES},
                        },
                    },
                },
            },
        },
    },
}


@dataclass(frozen=True)
class BaselineTable:
    entries: dict  # model name -> {metric: percent}
    source: dict = field(default_factory=dict, compare=False)  # model name -> table id

    @classmethod
    def from_json(cls, doc):
        import jsonschema

        try:
            jsonschema.validate(doc, _BASELINE_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise SchemaViolation(f"baselines file at {where}: {exc.message}") from None
        entries, source = {}, {}
        for table_id, table in doc["tables"].items():
            for name, vals in table["rows"].items():
                if name in entries:
                    raise ValidationError(f"baseline model {name!r} appears in more than one table")
                entries[name] = dict(vals)
                source[name] = table_id
        return cls(entries, source)

    @classmethod
    def load(cls, path=None):
        if path is None:
            text = resources.files("wastebench.data").joinpath("baselines.json").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_json(json.loads(text))

    def row(self, model_name):
        try:
            return self.entries[model_name]
        except KeyError:
            raise UnknownModelName(f"no baseline row for {model_name!r}") from None


@dataclass(frozen=True)
class BaselineComparison:
    model_name: str
    deltas: dict
    computed: dict
    baseline: dict
    tolerance_pp: float
    passed: bool

    def to_json(self):
        return asdict(self)

    def to_text(self):
        lines = [f"baseline comparison for {self.model_name} (tolerance {self.tolerance_pp:.2f} pp)"]
        for k, title in zip(METRIC_NAMES, METRIC_TITLES):
            ok = "ok" if abs(self.deltas[k]) <= self.tolerance_pp else "FAIL"
            lines.append(f"  {title:<12} computed {self.computed[k]:6.2f}  baseline {self.baseline[k]:6.2f}  "
                         f"delta {self.deltas[k]:+6.2f}  {ok}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines) + "\n"


def compare_to_baseline(computed, baseline: BaselineTable, model_name, tolerance_pp=2.0) -> BaselineComparison:
    """Per-metric deltas (computed - baseline) in percentage points."""
    row = baseline.row(model_name)
    vals = dict(computed) if isinstance(computed, dict) else computed.values()
    got = {k: round(vals[k] * 100, 10) for k in METRIC_NAMES}
    deltas = {k: round(got[k] - row[k], 10) for k in METRIC_NAMES}
    passed = all(abs(d) <= tolerance_pp for d in deltas.values())
    return BaselineComparison(model_name, deltas, got, dict(row), float(tolerance_pp), passed)
