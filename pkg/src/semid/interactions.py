"""Interaction logs, filtering, and the leave-one-out split.

A dataset is a mapping user -> chronological item sequence. Sparse
users and items (fewer than ``min_count`` interactions) are dropped
iteratively until both conditions hold at once, the usual fixed-point
protocol. Within each user, the last item is the test target, the
second-to-last the validation target, and everything before them is
training history.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DataError, FormatError, ParameterError


@dataclass
class InteractionDataset:
    sequences: dict[int, list[int]]  # user -> items, oldest first

    def __post_init__(self):
        for user, seq in self.sequences.items():
            if len(seq) < 3:
                raise DataError(f"user {user} has {len(seq)} interactions, need >= 3 to split")

    def users(self) -> list[int]:
        return sorted(self.sequences)

    def items(self) -> list[int]:
        seen = set()
        for seq in self.sequences.values():
            seen.update(seq)
        return sorted(seen)

    def n_interactions(self) -> int:
        return sum(len(s) for s in self.sequences.values())

    def train_items(self, user: int) -> list[int]:
        return self.sequences[user][:-2]

    def validation_target(self, user: int) -> int:
        return self.sequences[user][-2]

    def test_target(self, user: int) -> int:
        return self.sequences[user][-1]

    def validation_history(self, user: int) -> list[int]:
        return self.sequences[user][:-2]

    def test_history(self, user: int) -> list[int]:
        return self.sequences[user][:-1]


def load_interactions(path) -> list[tuple[int, int, int]]:
    """Parse ``user_id<TAB>item_id<TAB>timestamp`` lines."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read interaction file {path}: {exc}") from exc
    events = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'user<TAB>item<TAB>timestamp'")
        try:
            events.append((int(parts[0]), int(parts[1]), int(parts[2])))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: unparseable integer") from exc
    if not events:
        raise DataError(f"{path}: no interactions")
    return events


def filter_events(events, min_count: int = 5) -> list[tuple[int, int, int]]:
    """Iteratively drop users and items with < min_count events, to a fixed point."""
    if min_count < 3:
        raise ParameterError(f"min_count must be >= 3 for leave-one-out, got {min_count}")
    current = list(events)
    while True:
        user_counts = Counter(u for u, _, _ in current)
        item_counts = Counter(i for _, i, _ in current)
        kept = [
            (u, i, t)
            for u, i, t in current
            if user_counts[u] >= min_count and item_counts[i] >= min_count
        ]
        if len(kept) == len(current):
            return kept
        current = kept


def build_dataset(events, min_count: int = 5) -> InteractionDataset:
    kept = filter_events(events, min_count)
    if not kept:
        raise DataError("no interactions survive min-count filtering")
    by_user: dict[int, list[tuple[int, int, int]]] = {}
    for idx, (u, i, t) in enumerate(kept):
        by_user.setdefault(u, []).append((t, idx, i))
    sequences = {}
    for u, rows in by_user.items():
        rows.sort(key=lambda r: (r[0], r[1]))  # timestamp, then input order
        sequences[u] = [i for _, _, i in rows]
    return InteractionDataset(sequences)


def load_and_split(path, min_count: int = 5) -> InteractionDataset:
    return build_dataset(load_interactions(path), min_count)


def save_interactions(events, path) -> None:
    path = Path(path)
    lines = [f"{u}\t{i}\t{t}" for u, i, t in events]
    path.write_text("\n".join(lines) + "\n")
