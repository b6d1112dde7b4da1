"""Decoder-only attention network over identifier tokens.

Small causal language model used as the generative recommender backbone:
learned token and position embeddings, pre-norm attention blocks, and an
output projection to vocabulary logits. The training objective sharpens the
softmax with a temperature so hard negatives (high-scoring wrong tokens)
receive a larger share of the gradient.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .exceptions import DataError, DimensionError, ParameterError
from .nn import Embedding, LayerNorm, Linear
from .validation import check_positive_int
from .vocab import SequenceExample


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not np.isfinite(tau) or tau <= 0.0:
        raise ParameterError(f"tau must be a positive finite number, got {tau}")
    return tau


class AttentionBlock:
    """Pre-norm causal self-attention followed by a pre-norm feed-forward."""

    def __init__(self, rng, d_model: int, n_heads: int, ffn_dim: int, name: str):
        if d_model % n_heads != 0:
            raise ParameterError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.ln_attn = LayerNorm(d_model, name=f"{name}.ln_attn")
        self.ln_ffn = LayerNorm(d_model, name=f"{name}.ln_ffn")
        self.wq = Linear(rng, d_model, d_model, name=f"{name}.wq")
        self.wk = Linear(rng, d_model, d_model, name=f"{name}.wk")
        self.wv = Linear(rng, d_model, d_model, name=f"{name}.wv")
        self.wo = Linear(rng, d_model, d_model, name=f"{name}.wo")
        self.ffn_in = Linear(rng, d_model, ffn_dim, name=f"{name}.ffn_in")
        self.ffn_out = Linear(rng, ffn_dim, d_model, name=f"{name}.ffn_out")

    def _split_heads(self, x: Tensor, batch: int, length: int) -> Tensor:
        x = ad.reshape(x, (batch, length, self.n_heads, self.d_head))
        return ad.transpose(x, (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        batch, length, _ = x.shape
        h = self.ln_attn(x)
        q = self._split_heads(self.wq(h), batch, length)
        k = self._split_heads(self.wk(h), batch, length)
        v = self._split_heads(self.wv(h), batch, length)
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        scores = ad.mul(scores, 1.0 / np.sqrt(self.d_head))
        scores = ad.add(scores, ad.constant(mask))
        probs = ad.softmax(scores)
        context = ad.matmul(probs, v)
        context = ad.reshape(ad.transpose(context, (0, 2, 1, 3)), (batch, length, self.d_model))
        x = ad.add(x, self.wo(context))
        f = self.ln_ffn(x)
        return ad.add(x, self.ffn_out(ad.tanh(self.ffn_in(f))))

    def parameters(self) -> list[Parameter]:
        out = []
        for piece in (
            self.ln_attn, self.ln_ffn,
            self.wq, self.wk, self.wv, self.wo,
            self.ffn_in, self.ffn_out,
        ):
            out.extend(piece.parameters())
        return out


class CausalTransformer:
    """Token-level causal language model with logits over the full vocabulary."""

    def __init__(
        self,
        rng: np.random.Generator,
        vocab_size: int,
        d_model: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
        ffn_dim: int | None = None,
        max_len: int = 256,
    ):
        check_positive_int(vocab_size, "vocab_size")
        check_positive_int(d_model, "d_model")
        check_positive_int(n_layers, "n_layers")
        check_positive_int(n_heads, "n_heads")
        check_positive_int(max_len, "max_len")
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ffn_dim = int(ffn_dim) if ffn_dim is not None else 2 * d_model
        self.max_len = max_len
        self.token_emb = Embedding(rng, vocab_size, d_model, name="tok")
        self.pos_emb = Embedding(rng, max_len, d_model, name="pos")
        self.blocks = [
            AttentionBlock(rng, d_model, n_heads, self.ffn_dim, name=f"block{i}")
            for i in range(n_layers)
        ]
        self.ln_final = LayerNorm(d_model, name="ln_final")
        self.out_proj = Linear(rng, d_model, vocab_size, name="out")

    def parameters(self) -> list[Parameter]:
        out = self.token_emb.parameters() + self.pos_emb.parameters()
        for block in self.blocks:
            out.extend(block.parameters())
        return out + self.ln_final.parameters() + self.out_proj.parameters()

    def __call__(self, tokens: np.ndarray, positions: np.ndarray | None = None) -> Tensor:
        """Logits for a batch of token rows.

        With `positions` (batch, s), projects only those positions to logits;
        attention still runs over the full rows.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise DimensionError(f"expected (batch, length) tokens, got shape {tokens.shape}")
        batch, length = tokens.shape
        if length > self.max_len:
            raise DimensionError(f"sequence length {length} exceeds max_len {self.max_len}")
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise DataError("token id outside vocabulary")
        mask = np.triu(np.full((length, length), -np.inf), k=1)
        x = ad.add(self.token_emb(tokens), self.pos_emb(np.arange(length)))
        for block in self.blocks:
            x = block(x, mask)
        if positions is not None:
            positions = np.asarray(positions, dtype=np.int64)
            flat = ad.reshape(x, (batch * length, self.d_model))
            offsets = positions + (np.arange(batch) * length)[:, None]
            x = ad.take_rows(flat, offsets)
        return self.out_proj(self.ln_final(x))


def _as_example_list(examples) -> list[SequenceExample]:
    if isinstance(examples, SequenceExample):
        return [examples]
    examples = list(examples)
    if not examples:
        raise DataError("no examples given")
    return examples


def pack_batch(examples) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pad a batch to rectangular arrays.

    Returns (inputs, target_positions, target_tokens, target_mask). Row t of
    the inputs predicts the token at t+1, so the targets for example i sit at
    positions len(x)-1 .. len(x)+len(y)-2 of its input row.
    """
    examples = _as_example_list(examples)
    full = [np.concatenate([ex.x_tokens, ex.y_tokens]) for ex in examples]
    in_len = max(len(seq) - 1 for seq in full)
    n_targets = max(len(ex.y_tokens) for ex in examples)
    batch = len(examples)
    inputs = np.zeros((batch, in_len), dtype=np.int64)
    positions = np.zeros((batch, n_targets), dtype=np.int64)
    targets = np.zeros((batch, n_targets), dtype=np.int64)
    mask = np.zeros((batch, n_targets))
    for i, (ex, seq) in enumerate(zip(examples, full)):
        inputs[i, : len(seq) - 1] = seq[:-1]
        n_y = len(ex.y_tokens)
        start = len(ex.x_tokens) - 1
        positions[i, :n_y] = np.arange(start, start + n_y)
        targets[i, :n_y] = ex.y_tokens
        mask[i, :n_y] = 1.0
    return inputs, positions, targets, mask


def ranking_generation_loss(model: CausalTransformer, examples, tau: float = 1.0) -> Tensor:
    """Negative log-likelihood of the target identifiers under a tempered softmax.

    Per example the token losses are summed; the result averages over the
    batch. At tau=1 this is exactly token-level cross-entropy; tau<1 sharpens
    the distribution so high-scoring wrong tokens dominate the normalizer and
    draw a stronger corrective gradient.
    """
    tau = _check_tau(tau)
    examples = _as_example_list(examples)
    inputs, positions, targets, mask = pack_batch(examples)
    if targets.max() >= model.vocab_size:
        raise DataError("target token outside vocabulary")
    logits = model(inputs, positions=positions)
    if tau != 1.0:
        logits = ad.mul(logits, 1.0 / tau)
    log_probs = ad.log_softmax(logits)
    picked = ad.take_along_last(log_probs, targets)
    per_example = ad.tensor_sum(ad.mul(picked, ad.constant(mask)), axis=1)
    return ad.neg(ad.tensor_mean(per_example))


def hard_negative_weight(logits: np.ndarray, target_index: int, tau: float) -> np.ndarray:
    """Gradient share of each non-target token under the tempered softmax.

    Returns the softmax over the non-target logits at temperature tau, in the
    original order with the target removed. Larger logits (harder negatives)
    get larger weights, and lowering tau shifts weight toward the hardest.
    """
    tau = _check_tau(tau)
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise DimensionError(f"expected a logit vector, got shape {logits.shape}")
    if not np.isfinite(logits).all():
        raise DataError("logits contain non-finite values")
    if not 0 <= target_index < logits.shape[0]:
        raise ParameterError(f"target_index {target_index} outside [0, {logits.shape[0]})")
    rest = np.delete(logits, target_index) / tau
    rest -= rest.max()
    w = np.exp(rest)
    return w / w.sum()
