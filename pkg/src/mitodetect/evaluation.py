"""Classification metrics per domain and detection F1."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .data_model import DatasetManifest
from .geometry import Detection, match_detections


@dataclass
class BinaryMetrics:
    auc: float | None
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    balanced_accuracy: float | None
    n_pos: int
    n_neg: int
    tp: int
    tn: int
    fp: int
    fn: int


def auc_mann_whitney(labels: Sequence[int], probs: Sequence[float]) -> float | None:
    """P(score_pos > score_neg) + 0.5 P(tie); ``None`` for single-class input."""
    y = np.asarray(labels, dtype=int)
    s = np.asarray(probs, dtype=np.float64)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks handle ties as 1/2
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def binary_metrics(labels: Sequence[int], probs: Sequence[float], threshold: float = 0.5) -> BinaryMetrics:
    y = np.asarray(labels, dtype=int)
    p = np.asarray(probs, dtype=np.float64)
    if y.size == 0:
        raise ValueError("binary_metrics needs at least one record")
    if y.shape != p.shape:
        raise ValueError(f"{y.size} labels vs {p.size} probabilities")
    if not set(np.unique(y)) <= {0, 1}:
        raise ValueError("labels must be 0/1")
    pred = p >= threshold
    tp = int((pred & (y == 1)).sum())
    fn = int((~pred & (y == 1)).sum())
    tn = int((~pred & (y == 0)).sum())
    fp = int((pred & (y == 0)).sum())
    sens = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    bal = (sens + spec) / 2 if sens is not None and spec is not None else None
    return BinaryMetrics(
        auc=auc_mann_whitney(y, p),
        accuracy=(tp + tn) / y.size,
        sensitivity=sens,
        specificity=spec,
        balanced_accuracy=bal,
        n_pos=tp + fn,
        n_neg=tn + fp,
        tp=tp, tn=tn, fp=fp, fn=fn,
    )


@dataclass
class DomainMetricsReport:
    domains: dict[int, BinaryMetrics]
    overall: BinaryMetrics
    threshold: float = 0.5

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "domains": {str(d): asdict(m) for d, m in sorted(self.domains.items())},
            "overall": asdict(self.overall),
        }

    @classmethod
    def from_json(cls, d: dict) -> "DomainMetricsReport":
        return cls(
            {int(k): BinaryMetrics(**v) for k, v in d["domains"].items()},
            BinaryMetrics(**d["overall"]),
            d.get("threshold", 0.5),
        )

    def rows(self) -> list[tuple[str, BinaryMetrics]]:
        return [(str(d), m) for d, m in sorted(self.domains.items())] + [("Overall", self.overall)]

    def format_table(self) -> str:
        """Plain-text table: Domain, AUC, Acc, Sens, Spec, Bal. Acc (3 decimals)."""
        def f(v):
            return "  n/a" if v is None else f"{v:.3f}"

        header = f"{'Domain':<8} {'AUC':>5} {'Acc':>5} {'Sens':>5} {'Spec':>5} {'Bal. Acc':>8}"
        lines = [header, "-" * len(header)]
        for name, m in self.rows():
            if name == "Overall":
                lines.append("-" * len(header))
            lines.append(
                f"{name:<8} {f(m.auc):>5} {f(m.accuracy):>5} {f(m.sensitivity):>5} "
                f"{f(m.specificity):>5} {f(m.balanced_accuracy):>8}"
            )
        return "\n".join(lines)

    def save(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        js, txt = out_dir / f"{stem}.json", out_dir / f"{stem}.txt"
        js.write_text(json.dumps(self.to_json(), indent=1) + "\n")
        txt.write_text(self.format_table() + "\n")
        return js, txt


def domain_report(
    domain_ids: Sequence[int],
    labels: Sequence[int],
    probs: Sequence[float],
    threshold: float = 0.5,
) -> DomainMetricsReport:
    """Metrics per domain plus an overall row pooled over every record."""
    if not (len(domain_ids) == len(labels) == len(probs)):
        raise ValueError("domain_ids, labels and probs must have equal length")
    groups: dict[int, list[int]] = defaultdict(list)
    for i, d in enumerate(domain_ids):
        groups[int(d)].append(i)
    y = np.asarray(labels)
    p = np.asarray(probs, dtype=np.float64)
    domains = {d: binary_metrics(y[idx], p[idx], threshold) for d, idx in sorted(groups.items())}
    return DomainMetricsReport(domains, binary_metrics(y, p, threshold), threshold)


@dataclass
class DetectionScores:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def detection_f1(
    predictions: Mapping[str, Sequence[Detection]],
    truth: DatasetManifest | Mapping[str, Sequence[tuple[float, float]]],
    radius_px: float = 30.0,
) -> DetectionScores:
    """Pool greedy matches over all ground-truth patches.

    Predictions for patches absent from ``truth`` are ignored.
    """
    if isinstance(truth, DatasetManifest):
        truth = {r.patch_id: r.centroids or [] for r in truth}
    tp = fp = fn = 0
    for pid, pts in truth.items():
        res = match_detections(list(predictions.get(pid, [])), pts, radius_px)
        tp, fp, fn = tp + res.tp, fp + res.fp, fn + res.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return DetectionScores(precision, recall, f1, tp, fp, fn)


def write_classification_predictions(path: str | Path, rows: Sequence[tuple[str, float, int]], threshold: float = 0.5) -> None:
    """Rows of ``(patch_id, probability, domain_id)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_id", "probability", "predicted_label", "domain_id"])
        for pid, prob, dom in sorted(rows):
            w.writerow([pid, f"{prob:.6f}", int(prob >= threshold), dom])


def read_classification_predictions(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"patch_id": r["patch_id"], "probability": float(r["probability"]),
             "predicted_label": int(r["predicted_label"]), "domain_id": int(r["domain_id"])}
            for r in csv.DictReader(fh)
        ]
