"""PLCC / SRCC and evaluation of prediction files against labels."""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateVariance, IdMismatch, IoError, LengthMismatch, MalformedCsv


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(y, dtype=np.float64).reshape(-1)
    b = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise LengthMismatch(f"{a.size} labels vs {b.size} predictions")
    if a.size < 2:
        raise LengthMismatch("correlation needs at least two pairs")
    return a, b


def plcc(y, y_hat) -> float:
    a, b = _pair(y, y_hat)
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(np.dot(da, da)), float(np.dot(db, db))
    if saa == 0.0 or sbb == 0.0:
        raise DegenerateVariance("PLCC is undefined for a constant input")
    r = float(np.dot(da, db)) / np.sqrt(saa * sbb)
    return min(1.0, max(-1.0, r))


def rankdata(x) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(a.size, dtype=np.float64)
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srcc(y, y_hat) -> float:
    a, b = _pair(y, y_hat)
    return plcc(rankdata(a), rankdata(b))


@dataclass
class MetricReport:
    plcc: float
    srcc: float
    count: int
    split: str = "test"
    per_seed: list[tuple[float, float]] = field(default_factory=list)
    plcc_std: float | None = None
    srcc_std: float | None = None

    def as_dict(self) -> dict:
        return {
            "split": self.split,
            "count": self.count,
            "plcc": self.plcc,
            "srcc": self.srcc,
            "plcc_std": self.plcc_std,
            "srcc_std": self.srcc_std,
            "per_seed": [list(p) for p in self.per_seed],
        }


def _read_csv(path: str | Path, value_columns: Sequence[str]) -> dict[str, float]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            id_col = "image_id" if "image_id" in header else "image_path" if "image_path" in header else None
            value_col = next((c for c in value_columns if c in header), None)
            if id_col is None or value_col is None:
                raise MalformedCsv(f"{path}: header {header} lacks an id column and one of {list(value_columns)}")
            out: dict[str, float] = {}
            for lineno, row in enumerate(reader, 2):
                try:
                    key = row[id_col] if id_col == "image_id" else Path(row[id_col]).stem
                    value = float(row[value_col])
                except (TypeError, ValueError) as e:
                    raise MalformedCsv(f"{path}:{lineno}: {e}") from e
                if key in out:
                    raise MalformedCsv(f"{path}:{lineno}: duplicate id {key!r}")
                out[key] = value
            return out
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e


def read_predictions(path: str | Path) -> dict[str, float]:
    return _read_csv(path, ("score",))


def read_labels(path: str | Path) -> dict[str, float]:
    return _read_csv(path, ("mos",))


def write_predictions(path: str | Path, scores: dict[str, float]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "score"])
            for key, value in scores.items():
                writer.writerow([key, repr(float(value))])
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def _joined(preds: dict[str, float], labels: dict[str, float]) -> tuple[list[float], list[float]]:
    missing = sorted(set(labels) - set(preds))
    if missing:
        raise IdMismatch(f"no prediction for image id {missing[0]!r}")
    extra = sorted(set(preds) - set(labels))
    if extra:
        raise IdMismatch(f"no label for image id {extra[0]!r}")
    keys = sorted(labels)
    return [labels[k] for k in keys], [preds[k] for k in keys]


def evaluate(
    predictions: str | Path | Sequence[str | Path],
    labels: str | Path,
    split: str = "test",
) -> MetricReport:
    """PLCC/SRCC of one predictions file, or mean and std over several (one per seed)."""
    paths = [predictions] if isinstance(predictions, (str, Path)) else list(predictions)
    if not paths:
        raise ValueError("no prediction files given")
    truth = read_labels(labels)
    pairs = []
    for p in paths:
        y, y_hat = _joined(read_predictions(p), truth)
        pairs.append((plcc(y, y_hat), srcc(y, y_hat)))
    if len(pairs) == 1:
        return MetricReport(pairs[0][0], pairs[0][1], len(truth), split)
    ps, ss = [p for p, _ in pairs], [s for _, s in pairs]
    return MetricReport(
        statistics.fmean(ps),
        statistics.fmean(ss),
        len(truth),
        split,
        per_seed=pairs,
        plcc_std=statistics.stdev(ps),
        srcc_std=statistics.stdev(ss),
    )
