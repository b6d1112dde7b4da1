"""Learnable item tokenizer: residual quantization with regularized codebooks."""
from __future__ import annotations

import json

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from . import rng as rng_mod
from .autodiff import Parameter
from .cluster import constrained_kmeans
from .embeddings import EmbeddingTable
from .exceptions import DataError, DimensionError, FormatError, NumericError, ParameterError
from .losses import cf_alignment_loss, diversity_loss, total_loss
from .optim import AdamW
from .rqvae import (
    EncoderDecoder,
    kmeans_init_codebooks,
    quantize_for_training,
    residual_quantize,
    semantic_loss,
    straight_through,
)
from .validation import as_matrix, check_nonnegative, check_positive_int
from .vocab import Identifier, IdentifierSet

CHECKPOINT_VERSION = 1
_DIVERSITY_LEVELS = ("all", "first")


class SemanticIdTokenizer(TransformerMixin, BaseEstimator):
    """Residual-quantization tokenizer over item semantic embeddings.

    fit() learns an encoder/decoder pair and L codebooks by minibatch AdamW
    on the combined objective: reconstruction plus per-level quantization
    terms, an optional alignment term pulling each item's summed code
    embedding toward its collaborative-filtering embedding (weight alpha),
    and an optional contrastive term spreading code embeddings across
    clusters (weight beta). transform() maps semantic vectors to the L
    greedy nearest-code indices.

    cf_norm rescales the CF table so its mean row norm hits the given
    value before alignment. The in-batch softmax over inner products only
    produces a useful gradient when the logits are spread well apart;
    CF embeddings usually arrive with norms near 1, which leaves the
    softmax close to uniform and the alignment term inert at small alpha.
    None keeps the table's own scale.
    """

    def __init__(
        self,
        levels: int = 4,
        codebook_size: int = 256,
        code_dim: int = 32,
        hidden: tuple[int, ...] = (128, 128),
        mu: float = 0.25,
        alpha: float = 0.02,
        cf_norm: float | None = None,
        beta: float = 1e-4,
        n_clusters: int = 10,
        contrastive_mode: str = "infonce",
        diversity_levels: str = "all",
        epochs: int = 20000,
        batch_size: int = 1024,
        learning_rate: float = 1e-3,
        weight_decay: float = 0.0,
        kmeans_refresh: int = 100,
        dead_code_restart: bool = True,
        seed: int = 0,
    ):
        self.levels = levels
        self.codebook_size = codebook_size
        self.code_dim = code_dim
        self.hidden = hidden
        self.mu = mu
        self.alpha = alpha
        self.cf_norm = cf_norm
        self.beta = beta
        self.n_clusters = n_clusters
        self.contrastive_mode = contrastive_mode
        self.diversity_levels = diversity_levels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.kmeans_refresh = kmeans_refresh
        self.dead_code_restart = dead_code_restart
        self.seed = seed

    def _validate(self) -> None:
        check_positive_int(self.levels, "levels")
        check_positive_int(self.codebook_size, "codebook_size")
        check_positive_int(self.code_dim, "code_dim")
        check_nonnegative(self.mu, "mu")
        check_nonnegative(self.alpha, "alpha")
        if self.cf_norm is not None and (self.cf_norm <= 0 or not np.isfinite(self.cf_norm)):
            raise ParameterError(f"cf_norm must be positive or None, got {self.cf_norm}")
        check_nonnegative(self.beta, "beta")
        check_positive_int(self.n_clusters, "n_clusters")
        if self.n_clusters > self.codebook_size:
            raise ParameterError(
                f"n_clusters {self.n_clusters} exceeds codebook_size {self.codebook_size}"
            )
        if self.diversity_levels not in _DIVERSITY_LEVELS:
            raise ParameterError(
                f"diversity_levels must be one of {_DIVERSITY_LEVELS}, got {self.diversity_levels!r}"
            )
        if not isinstance(self.epochs, (int, np.integer)) or isinstance(self.epochs, bool) or self.epochs < 0:
            raise ParameterError(f"epochs must be a non-negative int, got {self.epochs!r}")
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.kmeans_refresh, "kmeans_refresh")
        if self.learning_rate <= 0 or not np.isfinite(self.learning_rate):
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")

    def _resolve_tables(self, semantic, cf):
        if not isinstance(semantic, EmbeddingTable):
            raise ParameterError("fit expects a semantic EmbeddingTable")
        item_ids = semantic.ids
        s_matrix = as_matrix(semantic.matrix, "semantic embeddings", min_rows=1)
        cf_matrix = None
        if self.alpha > 0:
            if cf is None:
                raise ParameterError("alpha > 0 requires a CF embedding table")
            missing = [int(i) for i in item_ids if i not in cf]
            if missing:
                raise DataError(
                    f"{len(missing)} items missing from the CF table (first: {missing[0]})"
                )
            cf_matrix = as_matrix(cf.rows_for(item_ids), "cf embeddings", min_rows=1)
            if cf_matrix.shape[1] != self.code_dim:
                raise DimensionError(
                    f"CF embedding width {cf_matrix.shape[1]} must equal "
                    f"code_dim {self.code_dim} for the alignment loss"
                )
            if self.cf_norm is not None:
                mean_norm = float(np.linalg.norm(cf_matrix, axis=1).mean())
                if mean_norm == 0.0:
                    raise DataError("CF embeddings are all zero; cannot rescale")
                cf_matrix = cf_matrix * (self.cf_norm / mean_norm)
        return item_ids, s_matrix, cf_matrix

    def _refresh_clusters(self, rng) -> list[np.ndarray]:
        return [
            constrained_kmeans(cb.data, self.n_clusters, rng, n_init=1).assignments
            for cb in self.codebooks_
        ]

    def fit(self, X: EmbeddingTable, cf: EmbeddingTable | None = None) -> "SemanticIdTokenizer":
        self._validate()
        item_ids, s_matrix, cf_matrix = self._resolve_tables(X, cf)
        n_items, d_semantic = s_matrix.shape

        init_rng = rng_mod.stream(self.seed, "tok-init")
        self.coder_ = EncoderDecoder(init_rng, d_semantic, self.code_dim, tuple(self.hidden))
        with ad.no_grad():
            latents = self.coder_.encode(s_matrix).data
        initial = kmeans_init_codebooks(
            latents, self.levels, self.codebook_size, rng_mod.stream(self.seed, "tok-kmeans")
        )
        self.codebooks_ = [
            Parameter(cb, name=f"codebook{l}") for l, cb in enumerate(initial)
        ]
        self.item_ids_ = np.asarray(item_ids, dtype=np.int64)

        params = self.coder_.parameters() + self.codebooks_
        optimizer = AdamW(params, lr=self.learning_rate, weight_decay=self.weight_decay)
        train_rng = rng_mod.stream(self.seed, "tok-train")
        div_rng = rng_mod.stream(self.seed, "tok-div")
        cluster_rng = rng_mod.stream(self.seed, "tok-clusters")
        restart_rng = rng_mod.stream(self.seed, "tok-restart")
        div_levels = None if self.diversity_levels == "all" else [0]

        clusters = self._refresh_clusters(cluster_rng) if self.beta > 0 else None
        self.log_: list[dict] = []
        for epoch in range(self.epochs):
            if self.beta > 0 and epoch > 0 and epoch % self.kmeans_refresh == 0:
                clusters = self._refresh_clusters(cluster_rng)
            order = train_rng.permutation(n_items)
            usage = np.zeros((self.levels, self.codebook_size), dtype=np.int64)
            sums = {"semantic": 0.0, "cf": 0.0, "diversity": 0.0, "total": 0.0}
            last_residuals = None
            for start in range(0, n_items, self.batch_size):
                batch = order[start : start + self.batch_size]
                s = ad.constant(s_matrix[batch])
                z = self.coder_.encode(s)
                result = quantize_for_training(z, self.codebooks_)
                s_hat = self.coder_.decode(straight_through(z, result))
                sem = semantic_loss(s, s_hat, result, mu=self.mu)
                cf_term = None
                if self.alpha > 0:
                    # align the quantized embedding: its gradient reaches the
                    # selected codes through the sum and the encoder through
                    # the straight-through surrogate
                    aligned = ad.add(result.quantized_tape, ad.sub(z, ad.stop_gradient(z)))
                    cf_term = cf_alignment_loss(
                        aligned, cf_matrix[batch], mode=self.contrastive_mode
                    )
                div_term = None
                if self.beta > 0:
                    div_term, _ = diversity_loss(
                        result.codes,
                        self.codebooks_,
                        clusters,
                        div_rng,
                        mode=self.contrastive_mode,
                        levels=div_levels,
                    )
                loss = total_loss(sem, cf_term, div_term, self.alpha, self.beta)
                if not np.isfinite(loss.item()):
                    raise NumericError(f"non-finite training loss at epoch {epoch}")
                optimizer.zero_grad()
                ad.backward(loss)
                optimizer.step()

                for level in range(self.levels):
                    usage[level] += np.bincount(
                        result.codes[:, level], minlength=self.codebook_size
                    )
                last_residuals = result.residuals
                weight = len(batch) / n_items
                sums["semantic"] += sem.item() * weight
                sums["cf"] += (cf_term.item() if cf_term is not None else 0.0) * weight
                sums["diversity"] += (div_term.item() if div_term is not None else 0.0) * weight
                sums["total"] += loss.item() * weight

            if self.dead_code_restart:
                self._restart_dead_codes(usage, last_residuals, restart_rng, optimizer)
            entry = {"epoch": epoch, **sums}
            for level in range(self.levels):
                entry[f"utilization_{level}"] = int((usage[level] > 0).sum())
            self.log_.append(entry)
        return self

    def _restart_dead_codes(self, usage, residuals, rng, optimizer) -> None:
        """Move codes nothing selected this epoch onto random batch residuals."""
        for level, cb in enumerate(self.codebooks_):
            dead = np.flatnonzero(usage[level] == 0)
            if dead.size == 0:
                continue
            pool = residuals[:, level, :]
            picks = rng.integers(0, pool.shape[0], size=dead.size)
            cb.data[dead] = pool[picks]
            optimizer.reset_rows(cb, dead)

    def _encode_matrix(self, X) -> tuple[np.ndarray, np.ndarray]:
        if isinstance(X, EmbeddingTable):
            ids = np.asarray(X.ids, dtype=np.int64)
            matrix = X.matrix
        else:
            matrix = as_matrix(X, "semantic embeddings", min_rows=1)
            ids = np.arange(matrix.shape[0], dtype=np.int64)
        with ad.no_grad():
            latents = self.coder_.encode(matrix).data
        return ids, latents

    def transform(self, X) -> np.ndarray:
        """Greedy per-level nearest-code indices, shape (n, levels)."""
        check_is_fitted(self, "codebooks_")
        _, latents = self._encode_matrix(X)
        return residual_quantize(latents, [cb.data for cb in self.codebooks_]).codes

    def quantized_embeddings(self, X) -> EmbeddingTable:
        """Summed selected-code embeddings per item, as an embedding table."""
        check_is_fitted(self, "codebooks_")
        ids, latents = self._encode_matrix(X)
        result = residual_quantize(latents, [cb.data for cb in self.codebooks_])
        return EmbeddingTable(ids, result.quantized)

    def assign_identifiers(self, X) -> IdentifierSet:
        """Unique identifier per item; code-tuple collisions get suffixes.

        Suffixes are dense 0,1,2,... in ascending item-id order within each
        colliding group. Sets collision_rate_ to the fraction of items that
        needed one.
        """
        check_is_fitted(self, "codebooks_")
        if isinstance(X, EmbeddingTable):
            ids = [int(i) for i in X.ids]
        else:
            ids = list(range(np.asarray(X).shape[0]))
        codes = self.transform(X)
        groups: dict[tuple, list[int]] = {}
        for item, row in zip(ids, codes):
            groups.setdefault(tuple(int(c) for c in row), []).append(item)
        items: dict[int, Identifier] = {}
        for tuple_codes, members in groups.items():
            if len(members) == 1:
                items[members[0]] = Identifier(tuple_codes)
            else:
                for suffix, item in enumerate(sorted(members)):
                    items[item] = Identifier(tuple_codes, suffix)
        identifiers = IdentifierSet(self.levels, self.codebook_size, items)
        self.collision_rate_ = identifiers.collision_rate()
        return identifiers

    def save(self, path) -> None:
        check_is_fitted(self, "codebooks_")
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "params": {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()},
            "d_semantic": self.coder_.d_semantic,
            "weights": {p.name: p.data.tolist() for p in self.coder_.parameters()},
            "codebooks": [cb.data.tolist() for cb in self.codebooks_],
            "item_ids": self.item_ids_.tolist(),
            "log": self.log_,
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f)

    @classmethod
    def load(cls, path) -> "SemanticIdTokenizer":
        try:
            with open(path, encoding="utf-8") as f:
                payload = json.load(f)
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {payload.get('format_version')!r}")
        params = dict(payload["params"])
        if "hidden" in params:
            params["hidden"] = tuple(params["hidden"])
        est = cls(**params)
        est.coder_ = EncoderDecoder(
            rng_mod.stream(est.seed, "tok-init"),
            payload["d_semantic"],
            est.code_dim,
            tuple(est.hidden),
        )
        weights = payload["weights"]
        for p in est.coder_.parameters():
            stored = np.asarray(weights[p.name], dtype=np.float64)
            if stored.shape != p.data.shape:
                raise DataError(
                    f"checkpoint weight {p.name} has shape {stored.shape}, expected {p.data.shape}"
                )
            p.data = stored
        est.codebooks_ = [
            Parameter(np.asarray(cb, dtype=np.float64), name=f"codebook{l}")
            for l, cb in enumerate(payload["codebooks"])
        ]
        est.item_ids_ = np.asarray(payload["item_ids"], dtype=np.int64)
        est.log_ = payload.get("log", [])
        return est
