"""Prediction records and the prediction CSV format shared by trainer, metrics and fusion.

Format: UTF-8, ``\\n`` line endings, header ``filename,p_negative,p_positive``
optionally followed by ``,true_label``; probabilities with 6 decimals; rows
sorted by filename.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

from .errors import IOFailure, MalformedRow, MissingFile, NormalizationViolation
from .manifest import Label

HEADER = ("filename", "p_negative", "p_positive")
HEADER_LABELLED = HEADER + ("true_label",)
NORM_TOL = 1e-6


@dataclass(frozen=True)
class PredictionRecord:
    filename: str
    p_negative: float
    p_positive: float
    true_label: Label | None = None

    def prob(self, label):
        return self.p_positive if Label(label) is Label.POSITIVE else self.p_negative

    @classmethod
    def from_positive(cls, filename, p_positive, true_label=None):
        return cls(filename, 1.0 - p_positive, p_positive, None if true_label is None else Label(true_label))


def _fmt(p):
    s = f"{p:.6f}"
    return "0.000000" if s == "-0.000000" else s


def format_predictions(records) -> str:
    """Serialise records; the negative column is written as ``1 - p_positive`` at 6 d.p."""
    rows = sorted(records, key=lambda r: r.filename)
    labelled = any(r.true_label is not None for r in rows)
    buf = io.StringIO()
    buf.write(",".join(HEADER_LABELLED if labelled else HEADER) + "\n")
    for r in rows:
        if "," in r.filename or "\n" in r.filename or '"' in r.filename:
            raise MalformedRow(r.filename, "filename contains a reserved character")
        p_pos = float(_fmt(r.p_positive))
        cells = [r.filename, _fmt(1.0 - p_pos), _fmt(p_pos)]
        if labelled:
            cells.append("" if r.true_label is None else str(int(r.true_label)))
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def write_predictions(records, path):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(format_predictions(records))
    except OSError as exc:
        raise IOFailure(f"cannot write predictions to {path}: {exc}") from exc


def parse_predictions(text: str) -> list[PredictionRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = tuple(next(reader))
    except StopIteration:
        raise MalformedRow(1, "empty file, header missing") from None
    if header not in (HEADER, HEADER_LABELLED):
        raise MalformedRow(1, f"unexpected header {','.join(header)!r}; expected {','.join(HEADER)}[,true_label]")
    width = len(header)
    out = []
    seen = set()
    for rowno, row in enumerate(reader, start=2):
        if len(row) != width:
            raise MalformedRow(rowno, f"expected {width} columns, got {len(row)}")
        name = row[0]
        if not name:
            raise MalformedRow(rowno, "empty filename")
        if name in seen:
            raise MalformedRow(rowno, f"duplicate filename {name!r}")
        seen.add(name)
        try:
            p_neg, p_pos = float(row[1]), float(row[2])
        except ValueError:
            raise MalformedRow(rowno, "probability is not a number") from None
        for p in (p_neg, p_pos):
            if not 0.0 <= p <= 1.0:
                raise MalformedRow(rowno, f"probability {p} outside [0, 1]")
        if abs(p_neg + p_pos - 1.0) > NORM_TOL + 1e-12:
            raise NormalizationViolation(f"row {rowno} ({name}): p_negative + p_positive = {p_neg + p_pos:.6f}")
        label = None
        if width == 4 and row[3] != "":
            if row[3] not in ("0", "1"):
                raise MalformedRow(rowno, f"true_label must be 0 or 1, got {row[3]!r}")
            label = Label(int(row[3]))
        out.append(PredictionRecord(name, p_neg, p_pos, label))
    return out


def read_predictions(path) -> list[PredictionRecord]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such prediction file: {path}")
    return parse_predictions(path.read_text(encoding="utf-8"))
