"""Generative next-item recommender over code identifiers."""
from __future__ import annotations

import json

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from . import rng as rng_mod
from .exceptions import DataError, FormatError, NumericError, ParameterError
from .interactions import InteractionDataset
from .metrics import RankingResult, rank_in_list, recall_at_k
from .optim import AdamW
from .seqmodel import CausalTransformer, ranking_generation_loss
from .trie import IdentifierTrie, constrained_beam_search
from .validation import check_positive_int
from .vocab import BEGIN, Identifier, IdentifierSet, build_examples

CHECKPOINT_VERSION = 1


class GenerativeRecommender(BaseEstimator):
    """Autoregressive recommender trained on identifier token sequences.

    fit() builds the vocabulary and trie from the given identifier set,
    expands the dataset into next-item examples, and trains the backbone
    with the tempered generation loss. recommend() decodes beam-search
    candidates constrained to catalog identifiers.
    """

    def __init__(
        self,
        d_model: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
        ffn_dim: int | None = None,
        epochs: int = 30,
        batch_size: int = 64,
        learning_rate: float = 1e-3,
        weight_decay: float = 0.01,
        tau: float = 1.0,
        mode: str = "sliding-window",
        history_cap: int = 20,
        beam_width: int = 20,
        validation_users: int = 50,
        validation_every: int = 1,
        seed: int = 0,
    ):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ffn_dim = ffn_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.tau = tau
        self.mode = mode
        self.history_cap = history_cap
        self.beam_width = beam_width
        self.validation_users = validation_users
        self.validation_every = validation_every
        self.seed = seed

    def _validate(self) -> None:
        check_positive_int(self.d_model, "d_model")
        check_positive_int(self.n_layers, "n_layers")
        check_positive_int(self.n_heads, "n_heads")
        if not isinstance(self.epochs, (int, np.integer)) or isinstance(self.epochs, bool) or self.epochs < 0:
            raise ParameterError(f"epochs must be a non-negative int, got {self.epochs!r}")
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.history_cap, "history_cap")
        check_positive_int(self.beam_width, "beam_width")
        check_positive_int(self.validation_every, "validation_every")
        if self.validation_users < 0:
            raise ParameterError(f"validation_users must be >= 0, got {self.validation_users}")
        if self.learning_rate <= 0 or not np.isfinite(self.learning_rate):
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")

    def _max_len(self, identifiers: IdentifierSet) -> int:
        # longest row: begin + capped history + target identifier, each item
        # contributing levels (+ suffix) + end tokens
        per_item = identifiers.levels + 2
        return 1 + (self.history_cap + 1) * per_item

    def fit(self, dataset: InteractionDataset, identifiers: IdentifierSet) -> "GenerativeRecommender":
        self._validate()
        missing = [i for i in dataset.items() if i not in identifiers]
        if missing:
            raise DataError(f"{len(missing)} dataset items lack identifiers (first: {missing[0]})")
        examples = build_examples(
            dataset, identifiers, mode=self.mode, history_cap=self.history_cap, stage="train"
        )
        if not examples:
            raise DataError("no training examples could be built")
        self.identifiers_ = identifiers
        self.vocab_ = identifiers.vocabulary()
        self.trie_ = IdentifierTrie.from_identifiers(identifiers)
        self.model_ = CausalTransformer(
            rng_mod.stream(self.seed, "rec-init"),
            vocab_size=self.vocab_.size,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            ffn_dim=self.ffn_dim,
            max_len=self._max_len(identifiers),
        )
        params = self.model_.parameters()
        optimizer = AdamW(
            params,
            lr=self.learning_rate,
            weight_decay=self.weight_decay,
        )
        train_rng = rng_mod.stream(self.seed, "rec-train")
        lengths = np.asarray([len(ex.x_tokens) + len(ex.y_tokens) for ex in examples])
        self.log_: list[dict] = []
        for epoch in range(self.epochs):
            # shuffle, then group similar lengths so padding stays small
            order = train_rng.permutation(len(examples))
            order = order[np.argsort(lengths[order], kind="stable")]
            batches = [
                order[start : start + self.batch_size]
                for start in range(0, len(order), self.batch_size)
            ]
            batch_order = train_rng.permutation(len(batches))
            total, seen = 0.0, 0
            for b in batch_order:
                batch = [examples[i] for i in batches[b]]
                loss = ranking_generation_loss(self.model_, batch, tau=self.tau)
                if not np.isfinite(loss.item()):
                    raise NumericError(f"non-finite training loss at epoch {epoch}")
                optimizer.zero_grad()
                ad.backward(loss)
                optimizer.step()
                total += loss.item() * len(batch)
                seen += len(batch)
            entry = {"epoch": epoch, "loss": total / seen}
            if (epoch + 1) % self.validation_every == 0 and self.validation_users > 0:
                entry["validation_recall@10"] = self._validation_recall(dataset, k=10)
            self.log_.append(entry)
        return self

    def _validation_recall(self, dataset: InteractionDataset, k: int) -> float:
        users = dataset.users()[: self.validation_users]
        results = []
        for user in users:
            recs = self.recommend(dataset.validation_history(user), k=k)
            ranked = [item for item, _ in recs]
            results.append(rank_in_list(user, ranked, dataset.validation_target(user)))
        return recall_at_k(results, k)

    def _encode_history(self, history) -> np.ndarray:
        sequences = self.identifiers_.token_sequences()
        tokens = [BEGIN]
        for item in list(history)[-self.history_cap :]:
            if item not in self.identifiers_:
                raise DataError(f"history item {item} has no identifier")
            tokens.extend(sequences[item])
        return np.asarray(tokens, dtype=np.int64)

    def recommend(self, history, k: int = 10) -> list[tuple[int, float]]:
        """Top-k (item, score) continuations of an item history."""
        check_is_fitted(self, "model_")
        check_positive_int(k, "k")
        width = max(k, self.beam_width)
        ranked = constrained_beam_search(
            self.model_, self._encode_history(history), self.trie_, beam_width=width
        )
        return ranked[:k]

    def predict(self, histories) -> np.ndarray:
        """Top-1 next item for each history."""
        return np.asarray([self.recommend(h, k=1)[0][0] for h in histories], dtype=np.int64)

    def evaluate(self, dataset: InteractionDataset, stage: str = "test", k: int = 10) -> list[RankingResult]:
        """Per-user rank of the held-out target within the top-k decode."""
        check_is_fitted(self, "model_")
        if stage not in ("validation", "test"):
            raise ParameterError(f"stage must be 'validation' or 'test', got {stage!r}")
        results = []
        for user in dataset.users():
            if stage == "validation":
                history = dataset.validation_history(user)
                target = dataset.validation_target(user)
            else:
                history = dataset.test_history(user)
                target = dataset.test_target(user)
            ranked = [item for item, _ in self.recommend(history, k=k)]
            results.append(rank_in_list(user, ranked, target))
        return results

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "params": self.get_params(),
            "identifiers": {
                "levels": self.identifiers_.levels,
                "codebook_size": self.identifiers_.codebook_size,
                "items": {
                    str(item): [list(ident.codes), ident.suffix]
                    for item, ident in self.identifiers_.items.items()
                },
            },
            "weights": {p.name: p.data.tolist() for p in self.model_.parameters()},
            "log": self.log_,
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f)

    @classmethod
    def load(cls, path) -> "GenerativeRecommender":
        try:
            with open(path, encoding="utf-8") as f:
                payload = json.load(f)
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise DataError(
                f"unsupported checkpoint version {payload.get('format_version')!r}"
            )
        est = cls(**payload["params"])
        ident_blob = payload["identifiers"]
        identifiers = IdentifierSet(
            ident_blob["levels"],
            ident_blob["codebook_size"],
            {
                int(item): Identifier(tuple(codes), suffix)
                for item, (codes, suffix) in ident_blob["items"].items()
            },
        )
        est.identifiers_ = identifiers
        est.vocab_ = identifiers.vocabulary()
        est.trie_ = IdentifierTrie.from_identifiers(identifiers)
        est.model_ = CausalTransformer(
            rng_mod.stream(est.seed, "rec-init"),
            vocab_size=est.vocab_.size,
            d_model=est.d_model,
            n_layers=est.n_layers,
            n_heads=est.n_heads,
            ffn_dim=est.ffn_dim,
            max_len=est._max_len(identifiers),
        )
        weights = payload["weights"]
        for p in est.model_.parameters():
            stored = np.asarray(weights[p.name], dtype=np.float64)
            if stored.shape != p.data.shape:
                raise DataError(f"checkpoint weight {p.name} has shape {stored.shape}, expected {p.data.shape}")
            p.data = stored
        est.log_ = payload.get("log", [])
        return est
