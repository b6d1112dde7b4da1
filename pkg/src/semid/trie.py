"""Prefix tree over identifier token sequences and constrained decoding.

The trie stores every catalog identifier's token path; during generation only
tokens that extend some catalog identifier are allowed, so the search can
never emit an out-of-catalog identifier.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .exceptions import DataError, ParameterError
from .seqmodel import CausalTransformer, _check_tau
from .vocab import END, IdentifierSet


class IdentifierTrie:
    """Token prefix tree; each end token maps to the item it completes."""

    def __init__(self):
        self._root: dict = {}
        self._n_items = 0

    @classmethod
    def from_identifiers(cls, identifiers: IdentifierSet) -> "IdentifierTrie":
        trie = cls()
        for item_id, tokens in identifiers.token_sequences().items():
            trie.insert(tokens, item_id)
        return trie

    def insert(self, tokens, item_id: int) -> None:
        tokens = tuple(int(t) for t in tokens)
        if not tokens or tokens[-1] != END:
            raise DataError(f"item {item_id}: identifier must end with the end token")
        if END in tokens[:-1]:
            raise DataError(f"item {item_id}: end token inside identifier")
        node = self._root
        for token in tokens[:-1]:
            node = node.setdefault(token, {})
        if END in node:
            raise DataError(f"item {item_id}: duplicate identifier")
        node[END] = int(item_id)
        self._n_items += 1

    @property
    def n_items(self) -> int:
        return self._n_items

    def _walk(self, prefix) -> dict | None:
        node = self._root
        for token in prefix:
            if token == END or token not in node:
                return None
            node = node[token]
        return node

    def valid_successors(self, prefix) -> tuple[int, ...]:
        """Tokens that extend the prefix toward some catalog identifier."""
        node = self._walk(prefix)
        if node is None:
            return ()
        return tuple(sorted(node))

    def item_at(self, tokens) -> int:
        tokens = tuple(tokens)
        if not tokens or tokens[-1] != END:
            raise DataError("identifier lookup requires a complete, end-terminated path")
        node = self._walk(tokens[:-1])
        if node is None or END not in node:
            raise DataError(f"no item at path {tokens}")
        return node[END]

    def items(self) -> dict[int, tuple[int, ...]]:
        """All (item, token path) pairs, by depth-first walk."""
        out: dict[int, tuple[int, ...]] = {}

        def visit(node, prefix):
            for token in sorted(node):
                if token == END:
                    out[node[token]] = (*prefix, END)
                else:
                    visit(node[token], (*prefix, token))

        visit(self._root, ())
        return out


def _last_position_log_probs(
    model: CausalTransformer, rows: np.ndarray, temperature: float
) -> np.ndarray:
    last = np.full((rows.shape[0], 1), rows.shape[1] - 1, dtype=np.int64)
    with ad.no_grad():
        logits = model(rows, positions=last).data[:, 0, :]
    if temperature != 1.0:
        logits = logits / temperature
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def constrained_beam_search(
    model: CausalTransformer,
    x_tokens: np.ndarray,
    trie: IdentifierTrie,
    beam_width: int,
    temperature: float = 1.0,
) -> list[tuple[int, float]]:
    """Beam search over the trie, scored by summed token log-probabilities.

    Returns up to beam_width (item, score) pairs sorted by score descending,
    ties by lowest item id. Temperature rescales logits before the log-softmax
    at every step; the default leaves them untouched.
    """
    if not isinstance(beam_width, (int, np.integer)) or isinstance(beam_width, bool):
        raise ParameterError(f"beam_width must be an int, got {beam_width!r}")
    if beam_width < 1:
        raise ParameterError(f"beam_width must be >= 1, got {beam_width}")
    temperature = _check_tau(temperature)
    x_tokens = np.asarray(x_tokens, dtype=np.int64).ravel()
    active: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    completed: list[tuple[int, float]] = []
    while active:
        rows = np.stack([np.concatenate([x_tokens, np.asarray(p, dtype=np.int64)]) for p, _ in active])
        log_probs = _last_position_log_probs(model, rows, temperature)
        candidates: list[tuple[tuple[int, ...], float]] = []
        for i, (prefix, score) in enumerate(active):
            for token in trie.valid_successors(prefix):
                extended = score + float(log_probs[i, token])
                if token == END:
                    completed.append((trie.item_at((*prefix, END)), extended))
                else:
                    candidates.append(((*prefix, token), extended))
        candidates.sort(key=lambda c: (-c[1], c[0]))
        active = candidates[:beam_width]
    completed.sort(key=lambda c: (-c[1], c[0]))
    return completed[:beam_width]
