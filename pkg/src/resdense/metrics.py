"""Series-level prediction and the evaluation metric suite.

A series is scored by forwarding every slice independently and averaging the
per-slice probabilities; the mean is thresholded (default 0.5, ties count as
covid) to pick the label. Reports carry confusion counts with covid as the
positive class, per-class precision/recall/F1, macro-F1 and accuracy.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import LABEL_COVID, LABEL_NON_COVID, SeriesSample, load_slice_array
from .tensor import Tensor

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class PredictionRecord:
    """Per-slice probabilities and the aggregated decision for one series."""

    series_id: str
    per_slice_probs: tuple
    aggregate_score: float
    predicted_label: str
    true_label: Optional[str] = None
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not self.per_slice_probs:
            raise ValueError(f"series {self.series_id!r} has no slice probabilities")
        mean = float(np.mean(np.asarray(self.per_slice_probs, dtype=np.float64)))
        if abs(mean - self.aggregate_score) > 1e-9:
            raise ValueError(
                f"aggregate_score {self.aggregate_score} is not the slice mean {mean}")
        expected = LABEL_COVID if self.aggregate_score >= self.threshold else LABEL_NON_COVID
        if self.predicted_label != expected:
            raise ValueError(
                f"predicted_label {self.predicted_label!r} inconsistent with "
                f"aggregate {self.aggregate_score} at threshold {self.threshold}")


def record_from_probs(series_id: str, probs: Sequence[float],
                      true_label: Optional[str] = None,
                      threshold: float = DEFAULT_THRESHOLD) -> PredictionRecord:
    probs = tuple(float(p) for p in probs)
    aggregate = float(np.mean(np.asarray(probs, dtype=np.float64)))
    label = LABEL_COVID if aggregate >= threshold else LABEL_NON_COVID
    return PredictionRecord(series_id=series_id, per_slice_probs=probs,
                            aggregate_score=aggregate, predicted_label=label,
                            true_label=true_label, threshold=threshold)


def predict_series(model, series: SeriesSample,
                   threshold: float = DEFAULT_THRESHOLD) -> PredictionRecord:
    """Forward every slice of a series (infer mode) and aggregate by mean."""
    arrays = [load_slice_array(p, model.config.input_size) for p in series.slice_paths]
    x = Tensor(np.stack(arrays).astype(model.dtype))
    probs = model.covid_probability(x, mode="infer")
    return record_from_probs(series.series_id, probs.tolist(),
                             true_label=series.label, threshold=threshold)


# ---------------------------------------------------------------------------
# metrics


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def macro_f1(per_class_f1: Sequence[float]) -> float:
    """Unweighted mean of per-class F1 values."""
    if len(per_class_f1) == 0:
        raise ValueError("macro_f1 needs at least one class")
    return float(np.mean(np.asarray(per_class_f1, dtype=np.float64)))


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: dict
    recall: dict
    f1: dict
    macro_f1: float
    accuracy: float
    n_series: int

    def to_json_dict(self) -> dict:
        return {
            "f1_covid": self.f1[LABEL_COVID],
            "f1_non_covid": self.f1[LABEL_NON_COVID],
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "confusion": {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn},
            "n_series": self.n_series,
        }

    def format_table(self) -> str:
        rows = [
            ("F1 (COVID)", self.f1[LABEL_COVID]),
            ("F1 (NON-COVID)", self.f1[LABEL_NON_COVID]),
            ("Macro F1", self.macro_f1),
            ("Accuracy", self.accuracy),
        ]
        width = max(len(name) for name, _ in rows)
        lines = [f"{'Score':<{width}}  Value", f"{'-' * width}  -----"]
        for name, value in rows:
            lines.append(f"{name:<{width}}  {100.0 * value:6.2f}  ({value:.4f})")
        lines.append(f"(n_series = {self.n_series}, confusion tp={self.tp} fp={self.fp} "
                     f"fn={self.fn} tn={self.tn})")
        return "\n".join(lines)


def report_from_records(records: Sequence[PredictionRecord]) -> MetricsReport:
    """Confusion counts at series granularity; covid is the positive class."""
    if not records:
        raise ValueError("cannot build a report from zero records")
    tp = fp = tn = fn = 0
    for r in records:
        if r.true_label is None:
            raise ValueError(f"series {r.series_id!r} has no true label")
        pred_covid = r.predicted_label == LABEL_COVID
        is_covid = r.true_label == LABEL_COVID
        if pred_covid and is_covid:
            tp += 1
        elif pred_covid and not is_covid:
            fp += 1
        elif not pred_covid and is_covid:
            fn += 1
        else:
            tn += 1

    def safe_div(a: int, b: int) -> float:
        return a / b if b else 0.0

    precision = {
        LABEL_COVID: safe_div(tp, tp + fp),
        LABEL_NON_COVID: safe_div(tn, tn + fn),
    }
    recall = {
        LABEL_COVID: safe_div(tp, tp + fn),
        LABEL_NON_COVID: safe_div(tn, tn + fp),
    }
    f1 = {label: f1_score(precision[label], recall[label]) for label in precision}
    n = len(records)
    return MetricsReport(
        tp=tp, fp=fp, tn=tn, fn=fn,
        precision=precision, recall=recall, f1=f1,
        macro_f1=macro_f1([f1[LABEL_COVID], f1[LABEL_NON_COVID]]),
        accuracy=(tp + tn) / n,
        n_series=n,
    )


def predict_all(model, samples: Sequence[SeriesSample],
                threshold: float = DEFAULT_THRESHOLD,
                workers: int = 1) -> list[PredictionRecord]:
    """predict_series over many series; workers > 1 parallelizes across series
    without changing any output value (results keep input order)."""
    if workers <= 1:
        return [predict_series(model, s, threshold) for s in samples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: predict_series(model, s, threshold), samples))


def evaluate(model, samples: Sequence[SeriesSample],
             threshold: float = DEFAULT_THRESHOLD,
             workers: int = 1) -> MetricsReport:
    for s in samples:
        if s.label is None:
            raise ValueError(f"series {s.series_id!r} is unlabeled")
    return report_from_records(predict_all(model, samples, threshold, workers))


def write_metrics_json(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
