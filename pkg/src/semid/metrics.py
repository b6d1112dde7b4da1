"""Single-positive ranking metrics.

Evaluation is leave-one-out: each user has one held-out target whose 1-indexed
rank r_p inside the scored list determines the metric. Recall@K is the strict
indicator I(r_p < K) and NDCG@K is I(r_p < K) / log2(r_p + 1); both close the
loop with the partial-AUC form below, which is what the tempered generation
loss optimizes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DataError, ParameterError
from .validation import check_positive_int


@dataclass(frozen=True)
class RankingResult:
    """Rank of one user's held-out item; rank is None when absent from the list."""

    user: int
    rank: int | None
    list_length: int

    def __post_init__(self):
        if self.rank is not None and self.rank < 1:
            raise ParameterError(f"rank must be >= 1 when present, got {self.rank}")


def rank_in_list(user: int, ranked_items, target: int) -> RankingResult:
    items = list(ranked_items)
    try:
        rank = items.index(target) + 1
    except ValueError:
        rank = None
    return RankingResult(user=user, rank=rank, list_length=len(items))


def _check_results(results) -> list[RankingResult]:
    results = list(results)
    if not results:
        raise DataError("no ranking results to aggregate")
    return results


def recall_at_k(results, k: int) -> float:
    check_positive_int(k, "k")
    results = _check_results(results)
    hits = [1.0 if r.rank is not None and r.rank < k else 0.0 for r in results]
    return float(np.mean(hits))


def ndcg_at_k(results, k: int) -> float:
    check_positive_int(k, "k")
    results = _check_results(results)
    gains = [
        1.0 / np.log2(r.rank + 1) if r.rank is not None and r.rank < k else 0.0
        for r in results
    ]
    return float(np.mean(gains))


def opauc_single_positive(r_p: int, k: int, vocab_size: int) -> float:
    """One-way partial AUC at false-positive rate k/(vocab_size - 1).

    Closed form for a single positive at rank r_p among vocab_size candidates:
    (k - r_p)/(k - 1) when r_p < k, else 0.
    """
    check_positive_int(r_p, "r_p")
    check_positive_int(vocab_size, "vocab_size")
    if not isinstance(k, (int, np.integer)) or isinstance(k, bool) or k <= 1:
        raise ParameterError(f"k must be an integer > 1, got {k!r}")
    if k >= vocab_size:
        raise ParameterError(f"k must be < vocab_size, got k={k}, vocab_size={vocab_size}")
    if r_p >= k:
        return 0.0
    return (k - r_p) / (k - 1)
