"""Interpretability, efficiency, and correlation metrics.

All functions are pure and numpy-only: they consume detached activation
records or report objects produced by the adaptation drivers. Summary
statistics use population standard deviation (ddof=0) throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    FormatError,
    InsufficientDataError,
    MeasurementError,
    ShapeError,
)


@dataclass
class ActivationRecord:
    """One sample's prototype activations under clean and adapted weights."""

    sample_id: int
    clean_activations: np.ndarray  # length P
    adapted_activations: np.ndarray  # length P
    clean_prediction: int
    adapted_prediction: int
    ground_truth: int
    mapped_activations: np.ndarray | None = None  # adapted s-bar values, length P

    def to_json(self) -> str:
        obj = {
            "sample_id": self.sample_id,
            "clean_activations": self.clean_activations.tolist(),
            "adapted_activations": self.adapted_activations.tolist(),
            "clean_prediction": self.clean_prediction,
            "adapted_prediction": self.adapted_prediction,
            "ground_truth": self.ground_truth,
        }
        if self.mapped_activations is not None:
            obj["mapped_activations"] = self.mapped_activations.tolist()
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "ActivationRecord":
        try:
            obj = json.loads(line)
            mapped = obj.get("mapped_activations")
            return cls(
                sample_id=int(obj["sample_id"]),
                clean_activations=np.asarray(obj["clean_activations"], dtype=np.float64),
                adapted_activations=np.asarray(obj["adapted_activations"], dtype=np.float64),
                clean_prediction=int(obj["clean_prediction"]),
                adapted_prediction=int(obj["adapted_prediction"]),
                ground_truth=int(obj["ground_truth"]),
                mapped_activations=None if mapped is None else np.asarray(mapped, dtype=np.float64),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad activation record: {exc}") from None


def dump_records(records: Iterable[ActivationRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")


def load_records(path) -> list[ActivationRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(ActivationRecord.from_json(line))
    return out


@dataclass
class MetricSummary:
    mean: float
    std: float
    values: np.ndarray = field(repr=False)


def _summarize(values: np.ndarray) -> MetricSummary:
    return MetricSummary(mean=float(values.mean()), std=float(values.std()), values=values)


def pac(records: Sequence[ActivationRecord]) -> MetricSummary:
    """Mean cosine between each sample's clean and adapted activation vectors."""
    if not records:
        raise InsufficientDataError("need at least one record")
    values = np.empty(len(records))
    for j, rec in enumerate(records):
        a, b = rec.clean_activations, rec.adapted_activations
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na <= 0 or nb <= 0:
            raise DegenerateInputError(f"zero-norm activation vector for sample {rec.sample_id}")
        values[j] = float(a @ b) / (na * nb)
    return _summarize(values)


@dataclass
class PcaWResult:
    mean: float
    std: float
    values: np.ndarray = field(repr=False)
    excluded: int = 0


def _top_indices(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort of the negated scores: ties resolve to the lowest index
    return np.argsort(-scores, kind="stable")[:k]


def pca_w(
    agg_sims: np.ndarray,
    head: np.ndarray,
    class_of: np.ndarray,
    ground_truths: np.ndarray,
    k: int = 5,
) -> PcaWResult:
    """Contribution share of the true class among each sample's top-k activated prototypes.

    Per sample, the k most activated prototypes are weighted by their
    contribution toward the ground-truth class (activation times absolute
    head weight); the score is the weight fraction owned by that class.
    Samples whose top-k contribution mass is not positive are excluded and
    counted rather than scored.
    """
    agg_sims = np.asarray(agg_sims, dtype=np.float64)
    if agg_sims.ndim != 2:
        raise ShapeError(f"expected n x P activations, got {agg_sims.shape}")
    n, num_protos = agg_sims.shape
    if not 1 <= k <= num_protos:
        raise ShapeError(f"k must be in [1, {num_protos}], got {k}")
    head = np.asarray(head, dtype=np.float64)
    class_of = np.asarray(class_of)
    values = []
    excluded = 0
    for i in range(n):
        y = int(ground_truths[i])
        top = _top_indices(agg_sims[i], k)
        contrib = agg_sims[i, top] * np.abs(head[y, top])
        total = contrib.sum()
        if total <= 0:
            excluded += 1
            continue
        own = contrib[class_of[top] == y].sum()
        values.append(own / total)
    if not values:
        raise InsufficientDataError("every sample had non-positive contribution mass")
    arr = np.asarray(values)
    return PcaWResult(mean=float(arr.mean()), std=float(arr.std()), values=arr, excluded=excluded)


def sample_pca_w(
    contributions: np.ndarray,
    class_of: np.ndarray,
    ground_truth: int,
    top_set_size: int = 5,
) -> float:
    """Share of one sample's top contributing prototypes owned by its true class."""
    contributions = np.asarray(contributions, dtype=np.float64)
    if contributions.ndim != 1:
        raise ShapeError(f"expected a length-P contribution vector, got {contributions.shape}")
    if not 1 <= top_set_size <= len(contributions):
        raise ShapeError(f"top_set_size must be in [1, {len(contributions)}], got {top_set_size}")
    top = _top_indices(contributions, top_set_size)
    total = contributions[top].sum()
    if total <= 0:
        raise DegenerateInputError("top contribution mass is not positive")
    own = contributions[top][np.asarray(class_of)[top] == ground_truth].sum()
    return float(own / total)


def prediction_stability(records: Sequence[ActivationRecord]) -> float:
    """Percentage of samples whose adapted prediction matches the clean one."""
    if not records:
        raise InsufficientDataError("need at least one record")
    agree = sum(1 for r in records if r.adapted_prediction == r.clean_prediction)
    return 100.0 * agree / len(records)


def selection_rate(report) -> float:
    """Percentage of streamed samples that participated in an update."""
    total = report.total_samples
    if total == 0:
        raise InsufficientDataError("report covers no samples")
    return 100.0 * report.selected_samples / total


def _median_throughput(report) -> float:
    records = report.records
    if not records:
        raise InsufficientDataError("report covers no batches")
    timed = records[1:] if len(records) > 1 else records  # first batch is warm-up
    rates = []
    for rec in timed:
        if rec.duration_s <= 0:
            raise MeasurementError(f"non-positive duration for batch {rec.index}")
        rates.append(rec.size / rec.duration_s)
    return float(np.median(rates))


def relative_speed(report, unadapted_report) -> float:
    """Adapted throughput as a percentage of unadapted throughput (medians)."""
    return 100.0 * _median_throughput(report) / _median_throughput(unadapted_report)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Product-moment correlation; undefined when either input has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"need equal-length 1-D inputs, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise InsufficientDataError(f"need at least 3 pairs, got {len(x)}")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(np.sqrt((dx * dx).sum()))
    sy = float(np.sqrt((dy * dy).sum()))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInputError("zero variance makes the correlation undefined")
    return float((dx * dy).sum() / (sx * sy))


def rankdata_average(x: Sequence[float]) -> np.ndarray:
    """Ranks starting at 1; tied values share the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation: pearson on average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"need equal-length 1-D inputs, got {x.shape} and {y.shape}")
    return pearson(rankdata_average(x), rankdata_average(y))


def load_scores(path) -> dict[int, float]:
    """Read a `sample_id,score` CSV into a dict keyed by sample id."""
    import csv

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty scores file") from None
        if [h.strip() for h in header] != ["sample_id", "score"]:
            raise FormatError(f"{path}: expected header 'sample_id,score', got {header}")
        scores = {}
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                scores[int(row[0])] = float(row[1])
            except (IndexError, ValueError) as exc:
                raise FormatError(f"{path}:{row_num}: bad row {row}: {exc}") from None
    return scores
