"""Deterministic random streams.

All randomness in the package flows from one master seed through
Philox, a 64-bit counter-based generator whose output is documented to
be identical across platforms and numpy builds. Every stage derives its
own independent stream from (seed, labels...), so stages can be rerun
or reordered without perturbing each other.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .exceptions import ParameterError

ALGORITHM = "philox-4x64"

_MASK64 = (1 << 64) - 1


def _label_entropy(label: int | str) -> int:
    if isinstance(label, bool):
        raise ParameterError("stream labels must be ints or strings, not bool")
    if isinstance(label, int):
        return label & _MASK64
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *labels: int | str) -> np.random.Generator:
    """Return the named Philox stream for ``(seed, labels...)``.

    The same arguments always yield the same stream; distinct labels
    yield statistically independent streams.
    """
    if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
        raise ParameterError(f"seed must be an integer, got {seed!r}")
    entropy = [int(seed) & _MASK64] + [_label_entropy(lab) for lab in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
