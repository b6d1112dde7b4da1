"""Token vocabulary over code identifiers and training-example construction.

Items are addressed by hierarchical code identifiers. Each code is tagged by
its level so the same code index at two levels maps to two distinct tokens,
and colliding code tuples are told apart by a trailing suffix token. Every
identifier's token sequence ends with the end-of-identifier token, which both
terminates generation and separates items inside a flattened history.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError, FormatError, ParameterError
from .validation import check_positive_int

PAD = 0
BEGIN = 1
END = 2
_RESERVED = 3


@dataclass(frozen=True)
class Identifier:
    """Code tuple plus an optional suffix separating collided items."""

    codes: tuple[int, ...]
    suffix: int | None = None

    def key(self) -> tuple:
        return (self.codes, self.suffix)


class IdentifierSet:
    """Catalog-wide identifier assignment.

    Holds the code tuple (and suffix, when collided) for every item, together
    with the geometry needed to build the token vocabulary.
    """

    def __init__(self, levels: int, codebook_size: int, items: dict[int, Identifier]):
        check_positive_int(levels, "levels")
        check_positive_int(codebook_size, "codebook_size")
        if not items:
            raise DataError("identifier set is empty")
        seen: set[tuple] = set()
        for item_id, ident in items.items():
            if len(ident.codes) != levels:
                raise DataError(
                    f"item {item_id}: identifier has {len(ident.codes)} codes, expected {levels}"
                )
            for code in ident.codes:
                if not 0 <= code < codebook_size:
                    raise DataError(f"item {item_id}: code {code} outside [0, {codebook_size})")
            if ident.suffix is not None and ident.suffix < 0:
                raise DataError(f"item {item_id}: negative suffix")
            if ident.key() in seen:
                raise DataError(f"item {item_id}: duplicate identifier {ident.key()}")
            seen.add(ident.key())
        self.levels = levels
        self.codebook_size = codebook_size
        self.items = {int(k): items[k] for k in sorted(items)}

    @property
    def n_suffix(self) -> int:
        suffixes = [i.suffix for i in self.items.values() if i.suffix is not None]
        return max(suffixes) + 1 if suffixes else 0

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, item_id: int) -> bool:
        return item_id in self.items

    def get(self, item_id: int) -> Identifier:
        if item_id not in self.items:
            raise DataError(f"item {item_id} has no identifier")
        return self.items[item_id]

    def vocabulary(self) -> "TokenVocabulary":
        return TokenVocabulary(self.levels, self.codebook_size, self.n_suffix)

    def token_sequences(self) -> dict[int, tuple[int, ...]]:
        vocab = self.vocabulary()
        return {item: vocab.encode(ident) for item, ident in self.items.items()}

    def collision_rate(self) -> float:
        collided = sum(1 for i in self.items.values() if i.suffix is not None)
        return collided / len(self.items)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"levels={self.levels}\tcodebook_size={self.codebook_size}\n")
            for item_id, ident in self.items.items():
                codes = ",".join(str(c) for c in ident.codes)
                suffix = "-" if ident.suffix is None else str(ident.suffix)
                f.write(f"{item_id}\t{codes}\t{suffix}\n")

    @classmethod
    def load(cls, path) -> "IdentifierSet":
        try:
            f = open(path, encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read identifier file {path}: {exc}") from exc
        with f:
            header = f.readline().strip()
            parts = dict(p.split("=", 1) for p in header.split("\t") if "=" in p)
            if "levels" not in parts or "codebook_size" not in parts:
                raise FormatError(f"{path}:1: expected 'levels=<L>\\tcodebook_size=<N>' header")
            try:
                levels = int(parts["levels"])
                codebook_size = int(parts["codebook_size"])
            except ValueError as exc:
                raise FormatError(f"{path}:1: non-integer header field") from exc
            items: dict[int, Identifier] = {}
            for lineno, line in enumerate(f, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                fields = line.split("\t")
                if len(fields) != 3:
                    raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
                try:
                    item_id = int(fields[0])
                    codes = tuple(int(c) for c in fields[1].split(","))
                    suffix = None if fields[2] == "-" else int(fields[2])
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: malformed field") from exc
                if item_id in items:
                    raise FormatError(f"{path}:{lineno}: duplicate item id {item_id}")
                items[item_id] = Identifier(codes, suffix)
        return cls(levels, codebook_size, items)


class TokenVocabulary:
    """Maps identifier pieces to a flat token space.

    Layout: 0 pad, 1 begin, 2 end, then level-tagged codes (level-l code c at
    3 + l*N + c for 0-based l), then suffix tokens.
    """

    def __init__(self, levels: int, codebook_size: int, n_suffix: int = 0):
        check_positive_int(levels, "levels")
        check_positive_int(codebook_size, "codebook_size")
        if n_suffix < 0:
            raise ParameterError(f"n_suffix must be >= 0, got {n_suffix}")
        self.levels = levels
        self.codebook_size = codebook_size
        self.n_suffix = n_suffix
        self.size = _RESERVED + levels * codebook_size + n_suffix

    def code_token(self, level: int, code: int) -> int:
        if not 0 <= level < self.levels:
            raise ParameterError(f"level {level} outside [0, {self.levels})")
        if not 0 <= code < self.codebook_size:
            raise ParameterError(f"code {code} outside [0, {self.codebook_size})")
        return _RESERVED + level * self.codebook_size + code

    def suffix_token(self, suffix: int) -> int:
        if not 0 <= suffix < self.n_suffix:
            raise ParameterError(f"suffix {suffix} outside [0, {self.n_suffix})")
        return _RESERVED + self.levels * self.codebook_size + suffix

    def encode(self, identifier: Identifier) -> tuple[int, ...]:
        if len(identifier.codes) != self.levels:
            raise DataError(
                f"identifier has {len(identifier.codes)} codes, expected {self.levels}"
            )
        tokens = [self.code_token(l, c) for l, c in enumerate(identifier.codes)]
        if identifier.suffix is not None:
            tokens.append(self.suffix_token(identifier.suffix))
        tokens.append(END)
        return tuple(tokens)

    def describe(self, token: int) -> str:
        if token == PAD:
            return "pad"
        if token == BEGIN:
            return "begin"
        if token == END:
            return "end"
        if _RESERVED <= token < _RESERVED + self.levels * self.codebook_size:
            level, code = divmod(token - _RESERVED, self.codebook_size)
            return f"code[{level}][{code}]"
        if token < self.size:
            return f"suffix[{token - _RESERVED - self.levels * self.codebook_size}]"
        raise ParameterError(f"token {token} outside vocabulary of size {self.size}")


@dataclass(frozen=True)
class SequenceExample:
    """One next-item prediction instance in token space."""

    user: int
    history: tuple[int, ...]
    target: int
    x_tokens: np.ndarray = field(repr=False)
    y_tokens: np.ndarray = field(repr=False)


_MODES = ("sliding-window", "last-target")
_STAGES = ("train", "validation", "test")


def _make_example(user, history, target, sequences, history_cap) -> SequenceExample:
    history = tuple(history[-history_cap:])
    for item in (*history, target):
        if item not in sequences:
            raise DataError(f"item {item} has no identifier")
    x = [BEGIN]
    for item in history:
        x.extend(sequences[item])
    y = sequences[target]
    return SequenceExample(
        user=user,
        history=history,
        target=target,
        x_tokens=np.asarray(x, dtype=np.int64),
        y_tokens=np.asarray(y, dtype=np.int64),
    )


def examples_from_stream(
    items: list[int],
    user: int,
    sequences: dict[int, tuple[int, ...]],
    mode: str = "sliding-window",
    history_cap: int = 20,
) -> list[SequenceExample]:
    """Expand one chronological item stream into next-item examples.

    last-target yields the single example predicting the final item from all
    earlier ones; sliding-window yields one example per prefix of length >= 2,
    each predicting its last item.
    """
    if mode not in _MODES:
        raise ParameterError(f"mode must be one of {_MODES}, got {mode!r}")
    check_positive_int(history_cap, "history_cap")
    if len(items) < 2:
        return []
    if mode == "last-target":
        return [_make_example(user, items[:-1], items[-1], sequences, history_cap)]
    return [
        _make_example(user, items[:t], items[t], sequences, history_cap)
        for t in range(1, len(items))
    ]


def build_examples(
    dataset,
    identifiers: IdentifierSet,
    mode: str = "sliding-window",
    history_cap: int = 20,
    stage: str = "train",
) -> list[SequenceExample]:
    """Build examples per user under the leave-one-out split.

    Training examples come from each user's stream with the last two items
    held out; validation and test yield one example per user, targeting the
    held-out item with the full preceding history (capped).
    """
    if stage not in _STAGES:
        raise ParameterError(f"stage must be one of {_STAGES}, got {stage!r}")
    sequences = identifiers.token_sequences()
    examples: list[SequenceExample] = []
    for user in dataset.users():
        if stage == "train":
            examples.extend(
                examples_from_stream(
                    dataset.train_items(user), user, sequences, mode, history_cap
                )
            )
        elif stage == "validation":
            examples.append(
                _make_example(
                    user,
                    dataset.validation_history(user),
                    dataset.validation_target(user),
                    sequences,
                    history_cap,
                )
            )
        else:
            examples.append(
                _make_example(
                    user,
                    dataset.test_history(user),
                    dataset.test_target(user),
                    sequences,
                    history_cap,
                )
            )
    return examples
