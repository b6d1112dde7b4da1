"""Synthetic catalog and interaction generator.

Items carry two latent labels: a semantic topic that shapes the
embedding vector (topic centroid plus Gaussian noise, rows then
L2-normalized the way text encoders emit them) and a behavior topic
that drives co-consumption. The two coincide with probability
``coupling``, so collaborative structure is deliberately only a partial
copy of the semantic structure; the gap between them is what the
collaborative regularizer has to close. Topic sizes follow a power law
(``topic_skew``) so the catalog has the long-tailed density that makes
code assignment bias appear in the first place.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .embeddings import EmbeddingTable
from .exceptions import ParameterError
from .validation import check_positive_int, check_unit_interval


@dataclass
class SyntheticSpec:
    n_items: int = 2000
    n_users: int = 1000
    n_topics: int = 25
    semantic_dim: int = 64
    topic_scale: float = 2.0
    noise_scale: float = 2.0
    topic_skew: float = 1.0
    coupling: float = 0.8
    min_len: int = 12
    max_len: int = 28
    preference_concentration: float = 0.25

    def validate(self) -> "SyntheticSpec":
        check_positive_int(self.n_items, "n_items")
        check_positive_int(self.n_users, "n_users")
        check_positive_int(self.n_topics, "n_topics")
        check_positive_int(self.semantic_dim, "semantic_dim")
        check_unit_interval(self.coupling, "coupling")
        if self.n_topics > self.n_items:
            raise ParameterError("more topics than items")
        if not 3 <= self.min_len <= self.max_len:
            raise ParameterError(f"need 3 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        if self.noise_scale < 0 or self.topic_scale <= 0 or self.preference_concentration <= 0:
            raise ParameterError("scales must be positive (noise may be zero)")
        if self.topic_skew < 0:
            raise ParameterError("topic_skew must be nonnegative")
        return self


@dataclass
class SyntheticData:
    semantic: EmbeddingTable
    events: list[tuple[int, int, int]]
    semantic_topic: np.ndarray  # (n_items,)
    behavior_topic: np.ndarray  # (n_items,)
    user_preferences: np.ndarray = field(repr=False)  # (n_users, n_topics)


def generate(spec: SyntheticSpec, seed: int) -> SyntheticData:
    spec.validate()
    rng = rng_mod.stream(seed, "synthetic")
    t = spec.n_topics

    centroids = rng.normal(0.0, spec.topic_scale, size=(t, spec.semantic_dim))

    # power-law topic sizes (each topic keeps at least one item), then
    # behavior topics that agree with probability `coupling` and
    # otherwise land on a different topic
    weights = (np.arange(t) + 1.0) ** -spec.topic_skew
    shares = weights / weights.sum() * (spec.n_items - t)
    counts = 1 + np.floor(shares).astype(np.int64)
    remainder = shares - np.floor(shares)
    short = spec.n_items - counts.sum()
    counts[np.argsort(remainder)[::-1][:short]] += 1
    semantic_topic = np.repeat(np.arange(t), counts)
    rng.shuffle(semantic_topic)
    behavior_topic = semantic_topic.copy()
    if t > 1:
        flip = rng.random(spec.n_items) >= spec.coupling
        offsets = rng.integers(1, t, size=spec.n_items)
        behavior_topic[flip] = (semantic_topic[flip] + offsets[flip]) % t

    vectors = centroids[semantic_topic] + rng.normal(
        0.0, spec.noise_scale, size=(spec.n_items, spec.semantic_dim)
    )
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    semantic = EmbeddingTable(np.arange(spec.n_items), vectors)

    items_by_behavior = [np.flatnonzero(behavior_topic == k) for k in range(t)]
    nonempty = np.array([len(b) > 0 for b in items_by_behavior])

    preferences = rng.dirichlet(
        np.full(t, spec.preference_concentration), size=spec.n_users
    )

    events: list[tuple[int, int, int]] = []
    for user in range(spec.n_users):
        prefs = preferences[user] * nonempty
        prefs = prefs / prefs.sum()
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        topics = rng.choice(t, size=length, p=prefs)
        for step, topic in enumerate(topics):
            pool = items_by_behavior[topic]
            item = int(pool[int(rng.integers(pool.size))])
            events.append((user, item, step))
    return SyntheticData(semantic, events, semantic_topic, behavior_topic, preferences)
