"""Confusion matrices, imbalance-aware rates, F-beta sweeps and report files.

Rates whose denominator is zero are ``None`` (undefined), never 0. In
binary tasks the positive class is the damaged/minority class.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from bssgan.errors import ConfigError, DataError

DEFAULT_BETAS = tuple(range(1, 11))


def confusion(pred, truth, k: int) -> np.ndarray:
    """K x K counts, rows = true class, columns = predicted class."""
    pred = np.asarray(pred, np.int64).ravel()
    truth = np.asarray(truth, np.int64).ravel()
    if pred.shape != truth.shape:
        raise ConfigError(f"{pred.size} predictions for {truth.size} labels")
    for name, v in (("prediction", pred), ("label", truth)):
        if v.size and (v.min() < 0 or v.max() >= k):
            raise ConfigError(f"{name} outside [0, {k})")
    return np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)


def normalized(cm: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Row-normalised matrix and the list of zero-support rows (left all-zero)."""
    cm = np.asarray(cm, np.float64)
    support = cm.sum(axis=1)
    empty = [int(i) for i in np.flatnonzero(support == 0)]
    out = np.zeros_like(cm)
    ok = support > 0
    out[ok] = cm[ok] / support[ok, None]
    return out, empty


def _rate(num, den) -> float | None:
    return float(num) / float(den) if den else None


def tpr_tnr(cm: np.ndarray, positive: int = 1) -> tuple[float | None, float | None]:
    cm = np.asarray(cm)
    if cm.shape != (2, 2):
        raise ConfigError(f"tpr_tnr needs a binary confusion matrix, got {cm.shape}")
    neg = 1 - positive
    tp, fn = cm[positive, positive], cm[positive, neg]
    tn, fp = cm[neg, neg], cm[neg, positive]
    return _rate(tp, tp + fn), _rate(tn, tn + fp)


def precision_recall(cm: np.ndarray, positive: int = 1) -> tuple[float | None, float | None]:
    cm = np.asarray(cm)
    tp = cm[positive, positive]
    return _rate(tp, cm[:, positive].sum()), _rate(tp, cm[positive].sum())


def f_beta(precision: float | None, recall: float | None, beta: float) -> float | None:
    if beta <= 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    if precision is None or recall is None:
        return None
    b2 = beta * beta
    den = b2 * precision + recall
    if den == 0:
        return 0.0
    return (1 + b2) * precision * recall / den


def f_beta_sweep(cm: np.ndarray, betas: Sequence[float] = DEFAULT_BETAS, positive: int = 1) -> list[tuple[float, float | None]]:
    p, r = precision_recall(cm, positive)
    return [(b, f_beta(p, r, b)) for b in betas]


def per_class_recall(cm: np.ndarray) -> list[float | None]:
    cm = np.asarray(cm)
    return [_rate(cm[i, i], cm[i].sum()) for i in range(cm.shape[0])]


def accuracy(cm: np.ndarray) -> float | None:
    cm = np.asarray(cm)
    return _rate(np.trace(cm), cm.sum())


def minority_class(support: Sequence[int]) -> int:
    """Smallest-support class; ties go to the later (damage) class."""
    support = list(support)
    small = min(support)
    return max(i for i, s in enumerate(support) if s == small)


def majority_class(support: Sequence[int]) -> int:
    support = list(support)
    return support.index(max(support))


@dataclass
class MetricsReport:
    pipeline: str
    checkpoint: str
    accuracy: float | None
    recall: list[float | None]
    tpr: float | None
    tnr: float | None
    precision: float | None
    f: dict[str, float | None]
    cm: list[list[int]]
    positive: int = 1
    undefined: list[str] = field(default_factory=list)

    @property
    def minority_recall(self) -> float | None:
        return self.recall[self.positive]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def build_report(cm: np.ndarray, pipeline: str = "", checkpoint: str = "", betas: Sequence[float] = (2, 5), positive: int | None = None) -> MetricsReport:
    """Summarise a confusion matrix.

    The positive class defaults to the smallest-support class. For
    ternary matrices TPR/TNR are that class's recall and the majority
    class's recall; precision and F-beta are one-vs-rest for the positive class.
    """
    cm = np.asarray(cm, np.int64)
    k = cm.shape[0]
    support = cm.sum(axis=1)
    pos = minority_class(support) if positive is None else positive
    recalls = per_class_recall(cm)
    if k == 2:
        tpr, tnr = tpr_tnr(cm, pos)
    else:
        tpr, tnr = recalls[pos], recalls[majority_class(support)]
    precision, recall = precision_recall(cm, pos)
    f = {_beta_key(b): f_beta(precision, recall, b) for b in betas}
    undefined = [name for name, v in (("accuracy", accuracy(cm)), ("tpr", tpr), ("tnr", tnr), ("precision", precision)) if v is None]
    undefined += [f"recall[{i}]" for i, r in enumerate(recalls) if r is None]
    return MetricsReport(pipeline, checkpoint, accuracy(cm), recalls, tpr, tnr, precision, f, cm.tolist(), pos, undefined)


def _beta_key(b: float) -> str:
    return str(int(b)) if float(b).is_integer() else repr(float(b))


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def emit_report(report: MetricsReport, out, betas: Sequence[float] = DEFAULT_BETAS, samples: np.ndarray | None = None) -> dict[str, Path]:
    """Write metrics.json, metrics.csv, cm.csv (row-normalised), fbeta_sweep.csv and an optional sample grid."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "metrics_json": out / "metrics.json",
            "metrics_csv": out / "metrics.csv",
            "cm_csv": out / "cm.csv",
            "fbeta_csv": out / "fbeta_sweep.csv",
        }
        paths["metrics_json"].write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")
        with open(paths["metrics_csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            keys = ["accuracy", "tpr", "tnr", "precision"] + [f"recall_{i}" for i in range(len(report.recall))] + [f"f{b}" for b in report.f]
            vals = [report.accuracy, report.tpr, report.tnr, report.precision, *report.recall, *report.f.values()]
            w.writerow(["pipeline", "checkpoint"] + keys)
            w.writerow([report.pipeline, report.checkpoint] + [_fmt(v) for v in vals])
        norm, _ = normalized(np.asarray(report.cm))
        with open(paths["cm_csv"], "w", newline="") as fh:
            csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in norm])
        with open(paths["fbeta_csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["beta", "f_beta"])
            for b, v in f_beta_sweep(np.asarray(report.cm), betas, report.positive):
                w.writerow([_beta_key(b), _fmt(v)])
        if samples is not None:
            paths["grid_png"] = save_grid(samples, out / "samples.png")
    except OSError as e:
        raise DataError(f"cannot write report under {out}: {e}") from e
    return paths


def sample_grid(images: np.ndarray, tiles: int = 8) -> np.ndarray:
    """Tile up to tiles x tiles images (N, S, S, 3) in [-1, 1] into one uint8 image."""
    from bssgan.sampling import to_uint8

    images = np.asarray(images)
    n, s = images.shape[0], images.shape[1]
    grid = np.zeros((tiles * s, tiles * s, 3), np.uint8)
    for i in range(min(n, tiles * tiles)):
        r, c = divmod(i, tiles)
        grid[r * s : (r + 1) * s, c * s : (c + 1) * s] = to_uint8(images[i])
    return grid


def save_grid(images: np.ndarray, path, tiles: int = 8) -> Path:
    from PIL import Image

    Image.fromarray(sample_grid(images, tiles), "RGB").save(path)
    return Path(path)


def counts_from_rates(rates: Sequence[float], support: Sequence[int]) -> list[int]:
    """Correct counts per class, round(rate * support)."""
    return [int(math.floor(r * n + 0.5)) for r, n in zip(rates, support)]
