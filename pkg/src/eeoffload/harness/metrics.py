"""Accuracy, on-device probability and confidence intervals."""
from __future__ import annotations

import math
from collections.abc import Sequence

from ..model import ExitTaken, InferenceResult

Z95 = 1.96


def _aligned(results: Sequence[InferenceResult], labels: Sequence[int]) -> None:
    if len(results) != len(labels):
        raise ValueError(f"{len(results)} results but {len(labels)} labels")


def overall_accuracy(results: Sequence[InferenceResult], labels: Sequence[int]) -> float:
    """Correct predictions over all samples, wherever they were classified."""
    _aligned(results, labels)
    if not results:
        raise ValueError("overall_accuracy of an empty result list")
    return sum(int(r.predicted_class == int(y)) for r, y in zip(results, labels)) / len(results)


def exits_at(result: InferenceResult, exit_id: int) -> bool:
    """True when the sample was classified by ``exit_id`` meeting the threshold.

    Fallback decisions are made in the cloud from stored records and are not
    counted as classified on the branch that produced the record.
    """
    return result.exit_id == exit_id and result.exit_taken is not ExitTaken.FALLBACK


def exit_point_accuracy(results: Sequence[InferenceResult], labels: Sequence[int], exit_id: int) -> float | None:
    """Accuracy among samples classified at ``exit_id``; None when there are none."""
    _aligned(results, labels)
    hits = [int(r.predicted_class == int(y)) for r, y in zip(results, labels) if exits_at(r, exit_id)]
    return sum(hits) / len(hits) if hits else None


def exit_point_count(results: Sequence[InferenceResult], exit_id: int) -> int:
    return sum(1 for r in results if exits_at(r, exit_id))


def on_device_probability(results: Sequence[InferenceResult]) -> float:
    if not results:
        raise ValueError("on_device_probability of an empty result list")
    return sum(1 for r in results if not r.offloaded) / len(results)


def mean_ci(values: Sequence[float]) -> tuple[float, float]:
    """Mean and 95% normal-approximation half-width ``1.96 * s / sqrt(n)``."""
    n = len(values)
    if n == 0:
        raise ValueError("mean of no values")
    mean = math.fsum(values) / n
    if n == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, Z95 * math.sqrt(var) / math.sqrt(n)
