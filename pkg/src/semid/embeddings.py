"""Item embedding tables and their on-disk format.

Files are plain TSV with a one-line header::

    dim=<d> count=<n>
    <item_id>\\t<v1>,<v2>,...

Floats are written with ``repr`` so a save/load round trip reproduces
every value bit for bit.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .exceptions import DataError, FormatError
from .validation import as_matrix


class EmbeddingTable:
    """Immutable mapping from item id to a fixed-width float vector."""

    def __init__(self, ids, matrix):
        ids = np.asarray(ids, dtype=np.int64)
        matrix = as_matrix(matrix, "embedding matrix")
        if ids.ndim != 1 or ids.shape[0] != matrix.shape[0]:
            raise DataError(f"{ids.shape[0]} ids for {matrix.shape[0]} vectors")
        if len(set(ids.tolist())) != ids.shape[0]:
            raise DataError("duplicate item ids in embedding table")
        order = np.argsort(ids, kind="stable")
        self.ids = ids[order]
        self.matrix = matrix[order]
        self._index = {int(item): row for row, item in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.ids.shape[0]

    def __contains__(self, item_id: int) -> bool:
        return int(item_id) in self._index

    def get(self, item_id: int) -> np.ndarray:
        try:
            return self.matrix[self._index[int(item_id)]]
        except KeyError:
            raise DataError(f"item {item_id} not in embedding table") from None

    def rows_for(self, item_ids) -> np.ndarray:
        return np.stack([self.get(i) for i in item_ids])

    def subset(self, item_ids) -> "EmbeddingTable":
        wanted = sorted(set(int(i) for i in item_ids))
        return EmbeddingTable(np.array(wanted), self.rows_for(wanted))

    def save(self, path) -> None:
        path = Path(path)
        lines = [f"dim={self.dim} count={len(self)}"]
        for item_id, row in zip(self.ids, self.matrix):
            lines.append(f"{int(item_id)}\t{','.join(repr(float(v)) for v in row)}")
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise DataError(f"cannot read embedding file {path}: {exc}") from exc
        lines = text.splitlines()
        if not lines:
            raise FormatError(f"{path}: empty embedding file")
        header = lines[0].split()
        try:
            fields = dict(part.split("=", 1) for part in header)
            dim = int(fields["dim"])
            count = int(fields["count"])
        except (ValueError, KeyError) as exc:
            raise FormatError(f"{path}:1: bad header {lines[0]!r}") from exc

        ids, rows = [], []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'id<TAB>values'")
            try:
                item_id = int(parts[0])
                vector = np.array([float(v) for v in parts[1].split(",")])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: unparseable number") from exc
            if vector.shape[0] != dim:
                raise FormatError(f"{path}:{lineno}: {vector.shape[0]} values, header says {dim}")
            if not np.isfinite(vector).all():
                raise FormatError(f"{path}:{lineno}: non-finite value")
            ids.append(item_id)
            rows.append(vector)
        if len(ids) != count:
            raise FormatError(f"{path}: header says count={count}, found {len(ids)} rows")
        if len(set(ids)) != len(ids):
            raise FormatError(f"{path}: duplicate item ids")
        return cls(np.array(ids), np.stack(rows))
