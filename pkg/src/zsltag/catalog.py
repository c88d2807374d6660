"""Multi-label annotation catalogs: loading, validation, filtering, statistics."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from zsltag.errors import DataError

logger = logging.getLogger(__name__)

_NON_ALNUM = re.compile(r"[^0-9a-z]+")


def normalize_label(name: str) -> str:
    """Lowercase and drop everything that is not a letter or digit.

    >>> normalize_label(" Classic Rock ")
    'classicrock'
    """
    return _NON_ALNUM.sub("", name.strip().lower())


class Catalog:
    """Instances, labels and a sparse binary annotation matrix.

    Rows of ``matrix`` follow ``instance_ids``; columns follow ``label_ids``.
    Label ids are stable integers and survive filtering, so a split manifest
    written against one catalog stays meaningful for its filtered versions.
    Instances and labels without any positive annotation are removed at
    construction time. Treat instances as immutable.
    """

    def __init__(
        self,
        instance_ids: Sequence[str],
        label_ids: Sequence[int],
        label_names: Sequence[str],
        matrix,
        audio: Sequence[str | None] | None = None,
    ):
        instance_ids = tuple(str(i) for i in instance_ids)
        label_ids = tuple(int(i) for i in label_ids)
        label_names = tuple(label_names)
        if audio is None:
            audio = (None,) * len(instance_ids)
        audio = tuple(audio)
        m = sparse.csr_matrix(matrix, dtype=np.int8)
        m.data[:] = 1
        m.eliminate_zeros()
        if m.shape != (len(instance_ids), len(label_ids)):
            raise DataError(f"matrix shape {m.shape} does not match {len(instance_ids)} instances x {len(label_ids)} labels")
        if len(audio) != len(instance_ids):
            raise DataError("audio references must align with instances")
        if len(label_names) != len(label_ids):
            raise DataError("label names must align with label ids")
        _check_unique(instance_ids, "instance_id")
        _check_unique(label_ids, "label_id")
        _check_unique(label_names, "label name")

        label_keep = np.asarray(m.sum(axis=0)).ravel() > 0
        if not label_keep.all():
            logger.info("dropping %d labels with no positive instance", int((~label_keep).sum()))
            m = m[:, label_keep]
            label_ids = tuple(x for x, k in zip(label_ids, label_keep) if k)
            label_names = tuple(x for x, k in zip(label_names, label_keep) if k)
        inst_keep = np.diff(m.indptr) > 0
        if not inst_keep.all():
            logger.info("dropping %d instances with no positive label", int((~inst_keep).sum()))
            m = m[inst_keep]
            instance_ids = tuple(x for x, k in zip(instance_ids, inst_keep) if k)
            audio = tuple(x for x, k in zip(audio, inst_keep) if k)
        if not instance_ids or not label_ids:
            raise DataError("catalog is empty after cleaning")

        m.sort_indices()
        self.instance_ids = instance_ids
        self.label_ids = label_ids
        self.label_names = label_names
        self.audio = audio
        self.matrix = m
        self._inst_index = {iid: k for k, iid in enumerate(instance_ids)}
        self._label_index = {lid: k for k, lid in enumerate(label_ids)}
        self._name_to_id = dict(zip(label_names, label_ids))

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, Iterable[str], str | None]]) -> "Catalog":
        """Build from ``(instance_id, label_names, audio_ref)`` triples.

        Label ids are assigned in ascending order of normalized name.
        """
        ids, labels, audio = [], [], []
        for iid, names, ref in records:
            ids.append(str(iid))
            labels.append(sorted({normalize_label(n) for n in names} - {""}))
            audio.append(ref or None)
        _check_unique(ids, "instance_id")
        vocab = sorted({n for ls in labels for n in ls})
        col = {n: k for k, n in enumerate(vocab)}
        rows = [r for r, ls in enumerate(labels) for _ in ls]
        cols = [col[n] for ls in labels for n in ls]
        m = sparse.csr_matrix(
            (np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(len(ids), len(vocab))
        )
        return cls(ids, range(len(vocab)), vocab, m, audio)

    @property
    def n_instances(self) -> int:
        return len(self.instance_ids)

    @property
    def n_labels(self) -> int:
        return len(self.label_ids)

    def instance_index(self, instance_id: str) -> int:
        try:
            return self._inst_index[instance_id]
        except KeyError:
            raise DataError(f"unknown instance {instance_id!r}") from None

    def label_index(self, label_id: int) -> int:
        try:
            return self._label_index[int(label_id)]
        except KeyError:
            raise DataError(f"unknown label id {label_id!r}") from None

    def label_id(self, name: str) -> int:
        try:
            return self._name_to_id[normalize_label(name)]
        except KeyError:
            raise DataError(f"unknown label {name!r}") from None

    def label_name(self, label_id: int) -> str:
        return self.label_names[self.label_index(label_id)]

    def has_label(self, name: str) -> bool:
        return normalize_label(name) in self._name_to_id

    def positives(self, instance_id: str) -> frozenset[int]:
        r = self.instance_index(instance_id)
        cols = self.matrix.indices[self.matrix.indptr[r]:self.matrix.indptr[r + 1]]
        return frozenset(self.label_ids[c] for c in cols)

    def submatrix(self, instance_ids: Sequence[str], label_ids: Sequence[int]) -> np.ndarray:
        """Dense 0/1 block restricted to the given rows and columns, in the given order."""
        rows = [self.instance_index(i) for i in instance_ids]
        cols = [self.label_index(j) for j in label_ids]
        return self.matrix[rows][:, cols].toarray()

    def records(self) -> list[tuple[str, list[str], str | None]]:
        out = []
        for r, iid in enumerate(self.instance_ids):
            cols = self.matrix.indices[self.matrix.indptr[r]:self.matrix.indptr[r + 1]]
            out.append((iid, [self.label_names[c] for c in cols], self.audio[r]))
        return out

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for lid, name in zip(self.label_ids, self.label_names):
            h.update(f"L{lid}:{name}\n".encode())
        for r, iid in enumerate(self.instance_ids):
            cols = self.matrix.indices[self.matrix.indptr[r]:self.matrix.indptr[r + 1]]
            h.update(f"I{iid}:{','.join(str(self.label_ids[c]) for c in cols)}\n".encode())
        return h.hexdigest()

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for iid, names, ref in self.records():
                obj = {"id": iid, "labels": names}
                if ref is not None:
                    obj["audio"] = ref
                f.write(json.dumps(obj) + "\n")

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "labels", "audio"])
            for iid, names, ref in self.records():
                w.writerow([iid, "|".join(names), ref or ""])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Catalog):
            return NotImplemented
        return (
            self.instance_ids == other.instance_ids
            and self.label_ids == other.label_ids
            and self.label_names == other.label_names
            and self.audio == other.audio
            and (self.matrix != other.matrix).nnz == 0
        )

    def __repr__(self) -> str:
        return f"Catalog({self.n_instances} instances, {self.n_labels} labels, {self.matrix.nnz} positives)"


def _check_unique(values, what: str) -> None:
    seen = set()
    for v in values:
        if v in seen:
            raise DataError(f"duplicate {what}: {v!r}")
        seen.add(v)


def load_catalog(annotations_path, format: str | None = None) -> Catalog:
    """Read a JSONL or CSV annotation file.

    ``format`` defaults to the file suffix. Errors carry the 1-based line number.
    """
    path = Path(annotations_path)
    if not path.exists():
        raise DataError(f"annotation file not found: {path}")
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "jsonl":
        records = list(_read_jsonl(path))
    elif fmt == "csv":
        records = list(_read_csv(path))
    else:
        raise DataError(f"unsupported annotation format {fmt!r}")
    before = len(records)
    cat = Catalog.from_records(records)
    if cat.n_instances < before:
        logger.info("load_catalog: dropped %d instances without labels", before - cat.n_instances)
    return cat


def _read_jsonl(path: Path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                iid = obj["id"]
                labels = obj.get("labels", [])
                if not isinstance(labels, list):
                    raise TypeError("labels must be a list")
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed annotation line ({exc})") from None
            yield str(iid), labels, obj.get("audio")


def _read_csv(path: Path):
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["id", "labels"]:
            raise DataError(f"{path}:1: expected header 'id,labels,audio'")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) < 2 or len(row) > 3:
                raise DataError(f"{path}:{lineno}: expected 2 or 3 fields, got {len(row)}")
            labels = [s for s in row[1].split("|") if s.strip()]
            yield row[0], labels, (row[2] if len(row) == 3 and row[2] else None)


def load_allowlist(path) -> set[str]:
    with open(path, encoding="utf-8") as f:
        names = {normalize_label(line) for line in f}
    names.discard("")
    return names


def filter_labels(catalog: Catalog, allowlist: Iterable[str]) -> tuple[Catalog, int, int]:
    """Keep only labels whose normalized name is allowed.

    Returns the filtered catalog, the number of dropped labels and the number
    of instances dropped because they lost every positive.
    """
    allowed = {normalize_label(a) for a in allowlist}
    if not allowed:
        raise DataError("allowlist is empty")
    keep = np.array([n in allowed for n in catalog.label_names])
    if not keep.any():
        raise DataError("no catalog label is in the allowlist")
    m = catalog.matrix[:, keep]
    ids = [x for x, k in zip(catalog.label_ids, keep) if k]
    names = [x for x, k in zip(catalog.label_names, keep) if k]
    out = Catalog(catalog.instance_ids, ids, names, m, catalog.audio)
    dropped_labels = catalog.n_labels - out.n_labels
    dropped_instances = catalog.n_instances - out.n_instances
    if dropped_labels or dropped_instances:
        logger.info("filter_labels: dropped %d labels, %d instances", dropped_labels, dropped_instances)
    return out, dropped_labels, dropped_instances


@dataclass(frozen=True)
class CatalogStats:
    n_instances: int
    n_labels: int
    label_cardinality: float
    per_label_counts: dict[int, int] = field(default_factory=dict)


def catalog_stats(catalog: Catalog) -> CatalogStats:
    counts = np.asarray(catalog.matrix.sum(axis=0)).ravel()
    return CatalogStats(
        n_instances=catalog.n_instances,
        n_labels=catalog.n_labels,
        label_cardinality=catalog.matrix.nnz / catalog.n_instances,
        per_label_counts={lid: int(c) for lid, c in zip(catalog.label_ids, counts)},
    )
