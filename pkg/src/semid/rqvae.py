"""Residual quantization with a learned encoder/decoder pair.

A semantic vector s is encoded to a latent z, which a stack of L
codebooks quantizes coarse-to-fine: level l picks the code nearest the
incoming residual (ties toward the lowest index) and passes on what is
left. The decoder sees the straight-through combination z + sg(zq - z),
so reconstruction gradients reach the encoder as if quantization were
the identity, while the quantization terms of the loss move the
codebooks.

Gradient routing in :func:`semantic_loss` follows the usual commitment
convention: selected codes are pulled toward frozen residuals by the
first quantization term and the encoder is pulled toward frozen codes
by the second; the residual chain freezes selected codes as it
subtracts them so deeper terms cannot reach earlier codes.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .cluster import kmeans
from .exceptions import DimensionError, ParameterError
from .nn import Mlp
from .validation import check_nonnegative, check_positive_int

__all__ = [
    "QuantizationResult",
    "residual_quantize",
    "quantize_with_codes",
    "quantize_for_training",
    "straight_through",
    "semantic_loss",
    "EncoderDecoder",
    "kmeans_init_codebooks",
]


@dataclass
class QuantizationResult:
    """Codes plus the residual trail, and (optionally) the taped graph pieces."""

    codes: np.ndarray  # (B, L) int64
    quantized: np.ndarray  # (B, d): sum of the selected code vectors
    residuals: np.ndarray  # (B, L+1, d): r_0 = z through r_L
    selected: list[Tensor] | None = None  # per level, gathered code embeddings
    chain: list[Tensor] | None = None  # taped r_0 .. r_L with sg on the codes
    quantized_tape: Tensor | None = None  # taped sum of selected code embeddings


def _check_codebooks(codebooks) -> list[np.ndarray]:
    if len(codebooks) == 0:
        raise ParameterError("need at least one codebook")
    arrays = [cb.data if isinstance(cb, Tensor) else np.asarray(cb, dtype=np.float64) for cb in codebooks]
    d = arrays[0].shape[1]
    for l, cb in enumerate(arrays):
        if cb.ndim != 2 or cb.shape[1] != d:
            raise DimensionError(f"codebook {l} has shape {cb.shape}, expected (*, {d})")
    return arrays


def residual_quantize(z, codebooks) -> QuantizationResult:
    """Greedy nearest-code quantization, level by level. Pure numpy, no graph.

    Accepts a single vector (d,) or a batch (B, d); the result is always
    batched. Ties in the nearest-code search go to the lowest index.
    """
    arrays = _check_codebooks(codebooks)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != arrays[0].shape[1]:
        raise DimensionError(f"latents have shape {z.shape}, expected (B, {arrays[0].shape[1]})")

    batch, dim = z.shape
    levels = len(arrays)
    codes = np.empty((batch, levels), dtype=np.int64)
    residuals = np.empty((batch, levels + 1, dim))
    residuals[:, 0] = z
    quantized = np.zeros((batch, dim))
    for l, cb in enumerate(arrays):
        r = residuals[:, l]
        d2 = (
            (r * r).sum(axis=1)[:, None]
            - 2.0 * r @ cb.T
            + (cb * cb).sum(axis=1)[None, :]
        )
        picks = d2.argmin(axis=1)  # argmin returns the first minimum: lowest index
        codes[:, l] = picks
        quantized += cb[picks]
        residuals[:, l + 1] = r - cb[picks]
    return QuantizationResult(codes=codes, quantized=quantized, residuals=residuals)


def quantize_with_codes(z: Tensor, codebooks, codes: np.ndarray) -> QuantizationResult:
    """Build the taped residual chain for an already-chosen code matrix."""
    codes = np.asarray(codes)
    selected = [ad.take_rows(cb, codes[:, l]) for l, cb in enumerate(codebooks)]
    chain = [z]
    current = z
    for emb in selected:
        current = ad.sub(current, ad.stop_gradient(emb))
        chain.append(current)
    quantized_tape = selected[0]
    for emb in selected[1:]:
        quantized_tape = ad.add(quantized_tape, emb)
    residuals = np.stack([t.data for t in chain], axis=1)
    return QuantizationResult(
        codes=codes,
        quantized=quantized_tape.data.copy(),
        residuals=residuals,
        selected=selected,
        chain=chain,
        quantized_tape=quantized_tape,
    )


def quantize_for_training(z: Tensor, codebooks) -> QuantizationResult:
    """Nearest-code selection on current values, then the taped chain."""
    raw = residual_quantize(z.data, codebooks)
    return quantize_with_codes(z, codebooks, raw.codes)


def straight_through(z: Tensor, result: QuantizationResult) -> Tensor:
    """Decoder input: forwards the quantized vector, backpropagates to z alone."""
    if result.quantized_tape is not None:
        offset = ad.stop_gradient(ad.sub(result.quantized_tape, z))
    else:
        offset = ad.stop_gradient(result.quantized - z.data)
    return ad.add(z, offset)


def semantic_loss(s, s_hat: Tensor, result: QuantizationResult, mu: float = 0.25) -> Tensor:
    """Reconstruction plus per-level quantization and commitment terms.

    loss = |s - s_hat|^2
         + sum_l ( |sg(r_{l-1}) - e_l|^2 + mu * |r_{l-1} - sg(e_l)|^2 )

    averaged over the batch. ``result`` must carry the taped chain
    (built by quantize_for_training / quantize_with_codes).
    """
    mu = check_nonnegative(mu, "mu")
    if result.selected is None or result.chain is None:
        raise ParameterError("semantic_loss needs a taped QuantizationResult")
    s = ad.as_tensor(s)
    batch = s.data.shape[0] if s.data.ndim == 2 else 1

    diff = ad.sub(s, s_hat)
    total = ad.tensor_sum(ad.square(diff))
    for r_prev, emb in zip(result.chain[:-1], result.selected):
        pull = ad.sub(ad.stop_gradient(r_prev), emb)
        total = ad.add(total, ad.tensor_sum(ad.square(pull)))
        if mu > 0.0:
            commit = ad.sub(r_prev, ad.stop_gradient(emb))
            total = ad.add(total, ad.mul(ad.tensor_sum(ad.square(commit)), mu))
    return ad.div(total, float(batch))


class EncoderDecoder:
    """Tanh MLP pair mapping semantic space to latent space and back."""

    def __init__(
        self,
        rng: np.random.Generator,
        d_semantic: int,
        d_code: int,
        hidden: tuple[int, ...] = (128, 128),
    ):
        check_positive_int(d_semantic, "d_semantic")
        check_positive_int(d_code, "d_code")
        self.d_semantic = d_semantic
        self.d_code = d_code
        self.hidden = tuple(hidden)
        self.encoder = Mlp(rng, d_semantic, self.hidden, d_code, name="encoder")
        self.decoder = Mlp(rng, d_code, self.hidden[::-1], d_semantic, name="decoder")

    def encode(self, s) -> Tensor:
        return self.encoder(ad.as_tensor(s))

    def decode(self, latent: Tensor) -> Tensor:
        return self.decoder(latent)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.decoder.parameters()


def kmeans_init_codebooks(
    latents: np.ndarray,
    levels: int,
    codebook_size: int,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Codebooks from K-means on the residual cascade of the given latents.

    Level 1 clusters the latents themselves; each deeper level clusters
    what the previous levels left behind. With fewer samples than codes
    a level falls back to seeded Gaussian noise at the residual scale.
    """
    check_positive_int(levels, "levels")
    check_positive_int(codebook_size, "codebook_size")
    residual = np.asarray(latents, dtype=np.float64).copy()
    if residual.ndim != 2:
        raise DimensionError(f"latents must be (n, d), got {residual.shape}")
    codebooks: list[np.ndarray] = []
    for level in range(levels):
        if residual.shape[0] < codebook_size:
            warnings.warn(
                f"level {level}: {residual.shape[0]} samples < {codebook_size} codes; "
                "falling back to Gaussian initialization"
            )
            scale = float(residual.std()) or 1.0
            cb = rng.normal(0.0, scale, size=(codebook_size, residual.shape[1]))
        else:
            cb = kmeans(residual, codebook_size, rng, max_iter=25, n_init=1).centroids.copy()
        codebooks.append(cb)
        d2 = (
            (residual * residual).sum(axis=1)[:, None]
            - 2.0 * residual @ cb.T
            + (cb * cb).sum(axis=1)[None, :]
        )
        residual = residual - cb[d2.argmin(axis=1)]
    return codebooks
