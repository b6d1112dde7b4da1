"""Diagnostics over trained tokenizers: code usage, geometry, and alignment.

Four views of what the codebooks learned: how evenly items spread over the
codes, where the code embeddings sit (low-dimensional projection), whether
the quantized embeddings still carry collaborative signal (substituted into
a trained CF scorer), and how much the identifiers of CF-similar item pairs
overlap.
"""
from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .cf import BprMF
from .embeddings import EmbeddingTable
from .exceptions import DataError, ParameterError
from .interactions import InteractionDataset
from .metrics import RankingResult, ndcg_at_k, recall_at_k
from .validation import as_matrix, check_positive_int
from .vocab import IdentifierSet


@dataclass(frozen=True)
class CodeHistogram:
    """Assignment counts over one codebook level."""

    level: int
    counts: np.ndarray
    utilization: int
    entropy: float


def code_histogram(identifiers: IdentifierSet, level: int) -> CodeHistogram:
    """Counts of catalog items per code at the given level (1-based)."""
    check_positive_int(level, "level")
    if level > identifiers.levels:
        raise ParameterError(f"level {level} outside [1, {identifiers.levels}]")
    counts = np.zeros(identifiers.codebook_size, dtype=np.int64)
    for ident in identifiers.items.values():
        counts[ident.codes[level - 1]] += 1
    probs = counts[counts > 0] / counts.sum()
    entropy = float(-(probs * np.log(probs)).sum())
    return CodeHistogram(
        level=level,
        counts=counts,
        utilization=int((counts > 0).sum()),
        entropy=entropy,
    )


def grouped_frequency_summary(histogram: CodeHistogram, group_size: int = 15) -> list[tuple[int, float]]:
    """Mean assignment count per descending-frequency group of codes."""
    check_positive_int(group_size, "group_size")
    ordered = np.sort(histogram.counts)[::-1]
    return [
        (i // group_size, float(ordered[i : i + group_size].mean()))
        for i in range(0, ordered.size, group_size)
    ]


@dataclass(frozen=True)
class PcaProjection:
    """Centered principal-component coordinates of one codebook."""

    coords: np.ndarray
    eigenvalues: np.ndarray
    n_components: int


def code_embedding_pca(codebook, n_components: int = 3) -> PcaProjection:
    """Project code embeddings onto their top principal components.

    Eigen-decomposition of the (1/N-normalized) covariance; components are
    sign-fixed so each one's largest-magnitude loading is positive. If the
    covariance rank is below n_components, the projection keeps only the
    informative ones and warns.
    """
    check_positive_int(n_components, "n_components")
    points = as_matrix(codebook, "codebook", min_rows=3)
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / points.shape[0]
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = eigenvalues[order]
    eigenvectors = eigenvectors[:, order]
    tol = max(eigenvalues[0], 0.0) * 1e-12 + 1e-30
    rank = int((eigenvalues > tol).sum())
    keep = min(n_components, points.shape[1])
    if rank < keep:
        warnings.warn(
            f"covariance rank {rank} below {keep} requested components; keeping {rank}"
        )
        keep = max(rank, 1)
    components = eigenvectors[:, :keep]
    for j in range(keep):
        pivot = np.argmax(np.abs(components[:, j]))
        if components[pivot, j] < 0:
            components[:, j] = -components[:, j]
    return PcaProjection(
        coords=centered @ components,
        eigenvalues=eigenvalues,
        n_components=keep,
    )


def export_code_embedding_pca(
    codebooks, level: int, identifiers: IdentifierSet | None = None, path=None
) -> tuple[PcaProjection, np.ndarray]:
    """PCA coordinates plus assignment counts for one level (1-based).

    Writes code_index, coordinates, and count columns as CSV when a path is
    given; counts are zero when no identifier set is supplied.
    """
    check_positive_int(level, "level")
    if level > len(codebooks):
        raise ParameterError(f"level {level} outside [1, {len(codebooks)}]")
    codebook = codebooks[level - 1]
    codebook = codebook.data if hasattr(codebook, "data") else np.asarray(codebook)
    projection = code_embedding_pca(codebook)
    if identifiers is not None:
        counts = code_histogram(identifiers, level).counts
    else:
        counts = np.zeros(codebook.shape[0], dtype=np.int64)
    if path is not None:
        axes = ",".join(f"pc{j}" for j in range(projection.n_components))
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"code_index,{axes},count\n")
            for idx in range(codebook.shape[0]):
                coords = ",".join(repr(c) for c in projection.coords[idx])
                f.write(f"{idx},{coords},{counts[idx]}\n")
    return projection, counts


def cf_ranking_results(
    cf_model: BprMF,
    dataset: InteractionDataset,
    stage: str = "test",
    item_factors: np.ndarray | None = None,
) -> list[RankingResult]:
    """Full-catalog rank of each user's held-out item under the CF scorer."""
    if stage not in ("validation", "test"):
        raise ParameterError(f"stage must be 'validation' or 'test', got {stage!r}")
    n_items = len(cf_model.item_ids_)
    results = []
    for user in dataset.users():
        target = dataset.test_target(user) if stage == "test" else dataset.validation_target(user)
        rank = cf_model.rank_of_item(user, target, item_factors)
        results.append(RankingResult(user=user, rank=rank, list_length=n_items))
    return results


def quantized_embedding_ranking(
    quantized: EmbeddingTable,
    cf_model: BprMF,
    dataset: InteractionDataset,
    stage: str = "test",
    k_values=(5, 10),
) -> dict[str, float]:
    """Score held-out items with quantized embeddings in place of CF ones.

    The CF model keeps its user factors and scoring rule; only the item side
    is replaced. When dimensions differ, the quantized embeddings are mapped
    to the CF space by the least-squares projection fitted on the catalog.
    """
    missing = [int(i) for i in cf_model.item_ids_ if i not in quantized]
    if missing:
        raise DataError(
            f"{len(missing)} items missing quantized embeddings (first: {missing[0]})"
        )
    matrix = quantized.rows_for(cf_model.item_ids_)
    d_cf = cf_model.item_factors_.shape[1]
    if matrix.shape[1] != d_cf:
        bridge, *_ = np.linalg.lstsq(matrix, cf_model.item_factors_, rcond=None)
        matrix = matrix @ bridge
    results = cf_ranking_results(cf_model, dataset, stage, item_factors=matrix)
    metrics: dict[str, float] = {}
    for k in k_values:
        metrics[f"recall@{k}"] = recall_at_k(results, k)
        metrics[f"ndcg@{k}"] = ndcg_at_k(results, k)
    return metrics


_OVERLAP_MODES = ("positionwise", "set")


def code_overlap_similarity(
    identifiers: IdentifierSet, pairs, mode: str = "positionwise"
) -> float:
    """Mean identifier overlap over item pairs.

    positionwise counts levels where both codes agree; set counts shared code
    values regardless of level (multiset intersection). Both divide by the
    number of levels, giving a value in [0, 1].
    """
    if mode not in _OVERLAP_MODES:
        raise ParameterError(f"mode must be one of {_OVERLAP_MODES}, got {mode!r}")
    pairs = list(pairs)
    if not pairs:
        raise DataError("no pairs to compare")
    total = 0.0
    for a, b in pairs:
        codes_a = identifiers.get(a).codes
        codes_b = identifiers.get(b).codes
        if mode == "positionwise":
            total += sum(x == y for x, y in zip(codes_a, codes_b)) / identifiers.levels
        else:
            common = Counter(codes_a) & Counter(codes_b)
            total += sum(common.values()) / identifiers.levels
    return total / len(pairs)
