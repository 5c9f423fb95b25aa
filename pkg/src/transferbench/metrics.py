"""Perturbation-norm statistics, attack-success-rate aggregation, rank correlation.

All pixel-space distances are reported on the 0-255 scale even though pixels
are stored in unit scale, so numbers line up with the usual epsilon=16
convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, ShapeError

# |delta| * 255 above this counts as a perturbed pixel for the l0 fraction
L0_THRESHOLD_255 = 1e-4


@dataclass(frozen=True)
class PerturbationStats:
    """Norm summary of one perturbation, 255-scale except l0_frac."""

    rmse_255: float
    linf_255: float
    l1_255: float
    l0_frac: float


@dataclass(frozen=True)
class EvaluationRecord:
    """Per-sample victim outcomes: one prediction and fooled flag per victim."""

    sample_id: int
    predictions: tuple[int, ...]
    fooled: tuple[bool, ...]


def perturbation_stats(adv: np.ndarray, org: np.ndarray) -> PerturbationStats:
    """Compute RMSE / l-inf / mean-l1 / l0-fraction of ``adv - org`` (unit scale in, 255 scale out)."""
    adv = np.asarray(adv, dtype=np.float64)
    org = np.asarray(org, dtype=np.float64)
    if adv.shape != org.shape:
        raise ShapeError(f"perturbation_stats: shape mismatch {adv.shape} vs {org.shape}")
    delta = 255.0 * (adv - org)
    n = delta.size
    return PerturbationStats(
        rmse_255=float(np.sqrt(np.mean(delta * delta))),
        linf_255=float(np.max(np.abs(delta))) if n else 0.0,
        l1_255=float(np.mean(np.abs(delta))),
        l0_frac=float(np.count_nonzero(np.abs(delta) > L0_THRESHOLD_255) / n),
    )


def attack_success_rate(
    records: Sequence[EvaluationRecord], num_victims: int
) -> tuple[list[float], float]:
    """Per-victim error rates on the adversarial examples plus their unweighted mean."""
    if not records:
        raise DataError("attack_success_rate: no evaluation records")
    for rec in records:
        if len(rec.fooled) != num_victims:
            raise DataError(
                f"attack_success_rate: record {rec.sample_id} has {len(rec.fooled)} "
                f"victim entries, expected {num_victims}"
            )
    fooled = np.array([rec.fooled for rec in records], dtype=np.float64)
    per_victim = [float(r) for r in fooled.mean(axis=0)]
    return per_victim, float(np.mean(per_victim))


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties replaced by the mean rank of the tied block."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation with average-rank tie handling.

    Returns NaN when either side has zero rank variance (constant input),
    where the coefficient is undefined.
    """
    if len(xs) != len(ys):
        raise DataError(f"spearman_rho: length mismatch {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise DataError("spearman_rho: need at least 2 points")
    rx = average_ranks(xs)
    ry = average_ranks(ys)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        return math.nan
    return float(rx @ ry) / denom
