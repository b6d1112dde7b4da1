"""Collaborative and diversity regularizers for tokenizer training.

Both losses are in-batch contrastive objectives. The ``infonce`` mode
applies -log to the softmax ratio (the standard form); the
``paper-literal`` mode negates the bare ratio. Everything is computed
through stabilized log-sum-exp, so large inner products are safe.
"""
from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DimensionError, ParameterError
from .validation import check_nonnegative

_MODES = ("infonce", "paper-literal")

__all__ = ["cf_alignment_loss", "diversity_loss", "total_loss"]


def _check_mode(mode: str) -> str:
    if mode not in _MODES:
        raise ParameterError(f"mode must be one of {_MODES}, got {mode!r}")
    return mode


def cf_alignment_loss(quantized: Tensor, cf_targets, mode: str = "infonce") -> Tensor:
    """Pull each item's quantized embedding toward its own CF embedding.

    Scores are plain inner products between the quantized batch and the
    frozen CF batch; item i's positive is position i, every other row of
    the same minibatch is a negative. The CF side never receives
    gradient.
    """
    _check_mode(mode)
    quantized = ad.as_tensor(quantized)
    targets = ad.stop_gradient(cf_targets)  # frozen by construction
    if quantized.data.ndim != 2 or targets.data.shape != quantized.data.shape:
        raise DimensionError(
            f"expected matching (B, d) arrays, got {quantized.data.shape} and {targets.data.shape}"
        )
    batch = quantized.data.shape[0]
    if batch < 2:
        warnings.warn("cf_alignment_loss with batch < 2 has no in-batch negatives")

    scores = ad.matmul(quantized, ad.transpose(targets))  # (B, B)
    diagonal = ad.take_along_last(scores, np.arange(batch))
    log_ratio = ad.sub(diagonal, ad.logsumexp(scores, axis=-1))
    if mode == "infonce":
        return ad.neg(ad.tensor_mean(log_ratio))
    return ad.neg(ad.tensor_mean(ad.exp(log_ratio)))


def diversity_loss(
    codes: np.ndarray,
    codebooks,
    clusters,
    rng: np.random.Generator,
    mode: str = "infonce",
    levels=None,
) -> tuple[Tensor, int]:
    """Contrastive spread of code embeddings, guided by code clusters.

    For batch item i at level l the anchor is its selected code
    embedding, the positive is a uniformly drawn *other* code from the
    anchor's cluster, and the denominator runs over all other codes of
    that level. Items whose anchor sits in a size-1 cluster are skipped
    at that level; the skip count is returned. The loss is averaged over
    contributing (item, level) pairs and differentiates only through
    the code embeddings.
    """
    _check_mode(mode)
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise DimensionError(f"codes must be (B, L), got {codes.shape}")
    if len(clusters) != len(codebooks):
        raise DimensionError("need one cluster assignment per codebook level")
    batch, n_levels = codes.shape
    if n_levels != len(codebooks):
        raise DimensionError(f"codes have {n_levels} levels, codebooks {len(codebooks)}")
    selected_levels = tuple(range(n_levels)) if levels is None else tuple(levels)
    for l in selected_levels:
        if not 0 <= l < n_levels:
            raise ParameterError(f"level {l} out of range")

    total: Tensor | None = None
    contributing = 0
    skipped = 0
    for l in selected_levels:
        cb = codebooks[l]
        n_codes = cb.data.shape[0] if isinstance(cb, Tensor) else cb.shape[0]
        if n_codes < 2:
            raise ParameterError("diversity needs at least 2 codes per level")
        assignment = np.asarray(clusters[l])
        anchors_idx = codes[:, l]

        positives = np.empty(batch, dtype=np.int64)
        mask = np.empty(batch)
        for i in range(batch):
            c = anchors_idx[i]
            members = np.flatnonzero(assignment == assignment[c])
            members = members[members != c]
            if members.size == 0:
                positives[i] = c  # placeholder; contribution masked out
                mask[i] = 0.0
                skipped += 1
            else:
                positives[i] = members[int(rng.integers(members.size))]
                mask[i] = 1.0
        contributing += int(mask.sum())

        anchors = ad.take_rows(cb, anchors_idx)  # (B, d)
        scores = ad.matmul(anchors, ad.transpose(ad.as_tensor(cb)))  # (B, N)
        exclude_self = np.zeros((batch, n_codes))
        exclude_self[np.arange(batch), anchors_idx] = -np.inf
        denom = ad.logsumexp(ad.add(scores, ad.constant(exclude_self)), axis=-1)
        numer = ad.take_along_last(scores, positives)
        log_ratio = ad.sub(numer, denom)
        per_item = ad.neg(log_ratio) if mode == "infonce" else ad.neg(ad.exp(log_ratio))
        masked = ad.mul(per_item, ad.constant(mask))
        level_sum = ad.tensor_sum(masked)
        total = level_sum if total is None else ad.add(total, level_sum)

    if contributing == 0:
        warnings.warn("diversity_loss skipped every item (all clusters are singletons)")
        return ad.constant(0.0), skipped
    return ad.div(total, float(contributing)), skipped


def total_loss(semantic: Tensor, cf: Tensor | None, diversity: Tensor | None, alpha: float, beta: float) -> Tensor:
    """semantic + alpha * cf + beta * diversity, with nonnegative weights."""
    alpha = check_nonnegative(alpha, "alpha")
    beta = check_nonnegative(beta, "beta")
    out = ad.as_tensor(semantic)
    if alpha > 0.0:
        if cf is None:
            raise ParameterError("alpha > 0 requires a collaborative loss term")
        out = ad.add(out, ad.mul(cf, alpha))
    if beta > 0.0:
        if diversity is None:
            raise ParameterError("beta > 0 requires a diversity loss term")
        out = ad.add(out, ad.mul(diversity, beta))
    return out
