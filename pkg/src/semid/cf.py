"""Collaborative-filtering embedding provider.

Matrix factorization trained on pairwise ranking (observed item scored
above a sampled unobserved item through a logistic loss). Deliberately
plain SGD on closed-form gradients: the model exists to provide frozen
item embeddings for the tokenizer, not to chase leaderboard numbers.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import rng as rng_mod
from .embeddings import EmbeddingTable
from .exceptions import DataError, ParameterError
from .interactions import InteractionDataset


class BprMF(BaseEstimator):
    """Pairwise-ranking matrix factorization over training interactions.

    Parameters
    ----------
    n_factors : embedding width for users and items.
    epochs : full passes over the (user, positive) pairs; 0 leaves the
        seeded random initialization untouched.
    learning_rate, reg : SGD step size and L2 penalty (the penalty is
        what keeps embedding norms bounded).
    batch_size : pairs per vectorized SGD update.
    seed : master seed for init, shuffling and negative sampling.
    """

    def __init__(
        self,
        n_factors: int = 32,
        epochs: int = 30,
        learning_rate: float = 0.05,
        reg: float = 0.01,
        batch_size: int = 1024,
        init_scale: float = 0.1,
        seed: int = 0,
    ):
        self.n_factors = n_factors
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.reg = reg
        self.batch_size = batch_size
        self.init_scale = init_scale
        self.seed = seed

    def _validate(self):
        if self.n_factors < 1:
            raise ParameterError(f"n_factors must be >= 1, got {self.n_factors}")
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.reg < 0:
            raise ParameterError(f"reg must be >= 0, got {self.reg}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")

    def fit(self, dataset: InteractionDataset, y=None) -> "BprMF":
        self._validate()
        if not isinstance(dataset, InteractionDataset):
            raise ParameterError("fit expects an InteractionDataset")
        users = dataset.users()
        items = dataset.items()
        u_index = {u: k for k, u in enumerate(users)}
        i_index = {i: k for k, i in enumerate(items)}

        init_rng = rng_mod.stream(self.seed, "cf-init")
        p = init_rng.normal(0.0, self.init_scale, size=(len(users), self.n_factors))
        q = init_rng.normal(0.0, self.init_scale, size=(len(items), self.n_factors))

        pair_u, pair_i = [], []
        train_sets: list[set[int]] = [set() for _ in users]
        for u in users:
            uk = u_index[u]
            for item in dataset.train_items(u):
                ik = i_index[item]
                pair_u.append(uk)
                pair_i.append(ik)
                train_sets[uk].add(ik)
        if not pair_u:
            raise DataError("no training interactions")
        pair_u = np.array(pair_u, dtype=np.int64)
        pair_i = np.array(pair_i, dtype=np.int64)

        train_rng = rng_mod.stream(self.seed, "cf-train")
        n_items = len(items)
        history = []
        for _ in range(self.epochs):
            order = train_rng.permutation(pair_u.shape[0])
            epoch_loss = 0.0
            for start in range(0, order.shape[0], self.batch_size):
                sel = order[start : start + self.batch_size]
                u, i = pair_u[sel], pair_i[sel]
                j = train_rng.integers(n_items, size=sel.shape[0])
                for k in range(j.shape[0]):  # resample until unobserved
                    while int(j[k]) in train_sets[u[k]]:
                        j[k] = train_rng.integers(n_items)
                x = np.einsum("bf,bf->b", p[u], q[i] - q[j])
                epoch_loss += float(np.logaddexp(0.0, -x).sum())
                e = 1.0 / (1.0 + np.exp(x))  # sigmoid(-x)
                gp = e[:, None] * (q[i] - q[j]) - self.reg * p[u]
                gqi = e[:, None] * p[u] - self.reg * q[i]
                gqj = -e[:, None] * p[u] - self.reg * q[j]
                np.add.at(p, u, self.learning_rate * gp)
                np.add.at(q, i, self.learning_rate * gqi)
                np.add.at(q, j, self.learning_rate * gqj)
            history.append(epoch_loss / pair_u.shape[0])

        self.user_ids_ = np.array(users, dtype=np.int64)
        self.item_ids_ = np.array(items, dtype=np.int64)
        self.user_factors_ = p
        self.item_factors_ = q
        self._user_index_ = u_index
        self._item_index_ = i_index
        self.loss_history_ = history
        return self

    def item_embedding_table(self) -> EmbeddingTable:
        check_is_fitted(self, "item_factors_")
        return EmbeddingTable(self.item_ids_, self.item_factors_)

    def score_items(self, user_id: int, item_factors: np.ndarray | None = None) -> np.ndarray:
        """Scores for every catalog item, in item_ids_ order."""
        check_is_fitted(self, "item_factors_")
        if user_id not in self._user_index_:
            raise DataError(f"unknown user {user_id}")
        factors = self.item_factors_ if item_factors is None else item_factors
        return factors @ self.user_factors_[self._user_index_[user_id]]

    def rank_of_item(self, user_id: int, item_id: int, item_factors: np.ndarray | None = None) -> int:
        """1-indexed full-catalog rank; score ties resolve toward lower item id."""
        scores = self.score_items(user_id, item_factors)
        if item_id not in self._item_index_:
            raise DataError(f"unknown item {item_id}")
        pos = self._item_index_[item_id]
        target = scores[pos]
        better = int((scores > target).sum())
        tied_before = int(((scores == target) & (self.item_ids_ < item_id)).sum())
        return 1 + better + tied_before


def nearest_cf_pairs(table: EmbeddingTable, metric: str = "ip") -> list[tuple[int, int]]:
    """For every item, its nearest neighbor (self excluded).

    metric "ip" ranks by inner product, "cosine" by direction only.
    Ties resolve toward the lowest item id; rows are sorted by item id
    already, so the first argmax hit is the right one.
    """
    if metric not in ("ip", "cosine"):
        raise ParameterError(f"metric must be 'ip' or 'cosine', got {metric!r}")
    if len(table) < 2:
        raise DataError("need at least two items for nearest-neighbor pairs")
    matrix = table.matrix
    if metric == "cosine":
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        matrix = np.divide(matrix, norms, out=np.zeros_like(matrix), where=norms > 0)
    scores = matrix @ matrix.T
    np.fill_diagonal(scores, -np.inf)
    nearest = scores.argmax(axis=1)
    return [(int(a), int(b)) for a, b in zip(table.ids, table.ids[nearest])]
