"""Label side information: instrument-attribute vectors and pretrained word vectors."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from zsltag.catalog import Catalog
from zsltag.errors import DataError

logger = logging.getLogger(__name__)

#: likelihood strictly above this is a positive annotation, strictly below a
#: negative one; exactly this value means "not annotated".
LIKELIHOOD_THRESHOLD = 0.5
_STD_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class SemanticTable:
    """One side-information vector per label.

    Rows of ``vectors`` follow ``label_ids``. ``mean``/``std`` are the
    per-dimension statistics used for standardization, when it was applied.
    """

    kind: str
    label_ids: tuple[int, ...]
    names: tuple[str, ...]
    vectors: np.ndarray
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("attribute", "word", "synthetic"):
            raise DataError(f"unknown semantic table kind {self.kind!r}")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.label_ids):
            raise DataError("semantic vectors must be a (n_labels, dim) matrix aligned with label_ids")
        if len(self.names) != len(self.label_ids):
            raise DataError("semantic table names must align with label_ids")
        object.__setattr__(self, "_index", {l: k for k, l in enumerate(self.label_ids)})

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.label_ids)

    def __contains__(self, label_id) -> bool:
        return label_id in self._index

    def rows(self, label_ids: Iterable[int]) -> np.ndarray:
        try:
            idx = [self._index[int(l)] for l in label_ids]
        except KeyError as exc:
            raise DataError(f"label {exc.args[0]} has no side-information vector") from None
        return self.vectors[idx]

    def vector(self, label_id: int) -> np.ndarray:
        return self.rows([label_id])[0]

    def name(self, label_id: int) -> str:
        return self.names[self._index[int(label_id)]]

    def find(self, name: str) -> int | None:
        for lid, n in zip(self.label_ids, self.names):
            if n == name:
                return lid
        return None

    def save(self, path) -> None:
        """Write ``<path>.json`` (header) and ``<path>.f32`` (little-endian float32 rows)."""
        path = Path(path)
        header = {
            "kind": self.kind,
            "dim": self.dim,
            "labels": [{"id": int(l), "name": n} for l, n in zip(self.label_ids, self.names)],
            "standardization": None
            if self.mean is None
            else {"mean": self.mean.tolist(), "std": self.std.tolist()},
        }
        path.with_suffix(".json").write_text(json.dumps(header, indent=1) + "\n", encoding="utf-8")
        self.vectors.astype("<f4").tofile(path.with_suffix(".f32"))

    @classmethod
    def load(cls, path) -> "SemanticTable":
        path = Path(path)
        try:
            header = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
            dim = int(header["dim"])
            labels = header["labels"]
            vec = np.fromfile(path.with_suffix(".f32"), dtype="<f4").astype(np.float64)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot read semantic table {path}: {exc}") from None
        if vec.size != dim * len(labels):
            raise DataError(f"{path.with_suffix('.f32')}: expected {dim * len(labels)} floats, found {vec.size}")
        st = header.get("standardization")
        return cls(
            kind=header["kind"],
            label_ids=tuple(int(l["id"]) for l in labels),
            names=tuple(l["name"] for l in labels),
            vectors=vec.reshape(len(labels), dim),
            mean=None if st is None else np.asarray(st["mean"], float),
            std=None if st is None else np.asarray(st["std"], float),
        )


def standardize_columns(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero mean, unit (population) variance per column.

    Constant columns are only centred, which leaves them at zero.
    """
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    safe = np.where(std > _STD_EPS, std, 1.0)
    if (std <= _STD_EPS).any():
        logger.warning("%d constant dimension(s) left at zero after centring", int((std <= _STD_EPS).sum()))
    return (x - mean) / safe, mean, std


# -- instrument attributes -------------------------------------------------------


@dataclass(frozen=True)
class LikelihoodAnnotations:
    vocabulary: tuple[str, ...]
    rows: tuple[tuple[str, str, float], ...]

    def __post_init__(self):
        vocab = set(self.vocabulary)
        for iid, attr, p in self.rows:
            if attr not in vocab:
                raise DataError(f"instance {iid!r}: unknown attribute {attr!r}")
            if not 0.0 <= p <= 1.0:
                raise DataError(f"instance {iid!r}: likelihood {p} outside [0, 1]")

    def by_instance(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for iid, attr, p in self.rows:
            d = out.setdefault(iid, {})
            if attr in d:
                raise DataError(f"instance {iid!r}: attribute {attr!r} given twice")
            d[attr] = p
        return out


def load_likelihoods(path, vocabulary: Sequence[str] | None = None) -> LikelihoodAnnotations:
    """Read a ``id,attribute,likelihood`` CSV. Vocabulary defaults to the sorted attribute names."""
    rows = []
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "attribute", "likelihood"]:
            raise DataError(f"{path}:1: expected header 'id,attribute,likelihood'")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                iid, attr, p = row
                rows.append((iid, attr.strip(), float(p)))
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed likelihood row {row!r}") from None
    vocab = tuple(vocabulary) if vocabulary is not None else tuple(sorted({r[1] for r in rows}))
    return LikelihoodAnnotations(vocab, tuple(rows))


def instance_attribute_vector(likelihoods: Mapping[str, float], vocabulary: Sequence[str]) -> np.ndarray:
    """Interleaved positive/negative indicator vector of length ``2 * len(vocabulary)``.

    Slot ``2k`` is set when attribute ``k`` has likelihood above 0.5, slot
    ``2k + 1`` when it is below 0.5. Exactly 0.5 or a missing attribute sets
    neither.
    """
    index = {a: k for k, a in enumerate(vocabulary)}
    v = np.zeros(2 * len(vocabulary))
    for attr, p in likelihoods.items():
        if attr not in index:
            raise DataError(f"unknown attribute {attr!r}")
        k = index[attr]
        if p > LIKELIHOOD_THRESHOLD:
            v[2 * k] = 1.0
        elif p < LIKELIHOOD_THRESHOLD:
            v[2 * k + 1] = 1.0
    return v


def accumulate_attributes(likelihoods: LikelihoodAnnotations, catalog: Catalog, reduce: str = "sum") -> np.ndarray:
    """Per-label sum (or mean) of instance attribute vectors, before standardization."""
    per_inst = likelihoods.by_instance()
    unknown = set(per_inst) - set(catalog.instance_ids)
    if unknown:
        logger.info("ignoring likelihood rows for %d instances outside the catalog", len(unknown))
    inst = np.stack([instance_attribute_vector(per_inst.get(i, {}), likelihoods.vocabulary) for i in catalog.instance_ids])
    acc = catalog.matrix.T.astype(np.float64) @ inst
    if reduce == "mean":
        acc = acc / np.asarray(catalog.matrix.sum(axis=0)).reshape(-1, 1)
    elif reduce != "sum":
        raise ValueError(f"reduce must be 'sum' or 'mean', got {reduce!r}")
    return np.asarray(acc)


def build_attribute_table(
    likelihoods: LikelihoodAnnotations, catalog: Catalog, reduce: str = "sum", standardize: bool = True
) -> SemanticTable:
    acc = accumulate_attributes(likelihoods, catalog, reduce)
    mean = std = None
    if standardize:
        acc, mean, std = standardize_columns(acc)
    return SemanticTable("attribute", catalog.label_ids, catalog.label_names, acc, mean, std)


# -- word vectors ------------------------------------------------------------------


class WordVectors:
    """Pretrained word embeddings: ``words[k]`` owns row ``k`` of ``matrix``."""

    def __init__(self, words: Sequence[str], matrix: np.ndarray):
        self.words = tuple(words)
        self.matrix = matrix
        self._index = {}
        for k, w in enumerate(self.words):
            self._index.setdefault(w, k)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word) -> bool:
        return word in self._index

    def __getitem__(self, word: str) -> np.ndarray:
        return self.matrix[self._index[word]]

    def nearest_words(self, query: np.ndarray, k: int) -> list[str]:
        sims = _cosine_rows(self.matrix, query)
        order = np.argsort(-sims, kind="stable")[:k]
        return [self.words[i] for i in order]


def load_word_vectors(path, keep: Iterable[str] | None = None) -> WordVectors:
    """Read ``word v1 ... vd`` lines. ``keep`` restricts the result to a vocabulary subset."""
    keep = None if keep is None else set(keep)
    words, rows, dim = [], [], None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if not parts or parts == [""]:
                continue
            if dim is None:
                dim = len(parts) - 1
                if dim < 1:
                    raise DataError(f"{path}:{lineno}: no vector values")
            elif len(parts) - 1 != dim:
                raise DataError(f"{path}:{lineno}: inconsistent dimension {len(parts) - 1}, expected {dim}")
            if keep is not None and parts[0] not in keep:
                continue
            try:
                rows.append([float(x) for x in parts[1:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed float") from None
            words.append(parts[0])
    if dim is None:
        raise DataError(f"{path}: empty word-vector file")
    return WordVectors(words, np.asarray(rows, dtype=np.float64).reshape(len(words), dim))


def build_word_table(catalog: Catalog, raw: WordVectors, standardize: bool = False) -> tuple[SemanticTable, list[str]]:
    """Look up each (normalized) label name; labels missing from ``raw`` are returned as dropped."""
    if len(raw) == 0:
        raise DataError("word-vector table is empty")
    kept_ids, kept_names, vecs, dropped = [], [], [], []
    for lid, name in zip(catalog.label_ids, catalog.label_names):
        if name in raw:
            kept_ids.append(lid)
            kept_names.append(name)
            vecs.append(raw[name])
        else:
            dropped.append(name)
    if not kept_ids:
        raise DataError("no catalog label has a word vector")
    if dropped:
        logger.info("build_word_table: %d labels missing from the word vectors", len(dropped))
    m = np.array(vecs)
    mean = std = None
    if standardize:
        m, mean, std = standardize_columns(m)
    return SemanticTable("word", tuple(kept_ids), tuple(kept_names), m, mean, std), dropped


# -- neighbours ------------------------------------------------------------------


class Neighbor(NamedTuple):
    label_id: int
    name: str
    score: float


def _cosine_rows(m: np.ndarray, q: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1) * np.linalg.norm(q)
    dots = m @ q
    return np.divide(dots, norms, out=np.zeros_like(dots, dtype=float), where=norms > 0)


def rank_by_cosine(vectors: np.ndarray, names: Sequence[str], label_ids: Sequence[int], query: np.ndarray, k: int) -> list[Neighbor]:
    """Descending cosine similarity, ties broken by ascending name."""
    q = np.asarray(query, dtype=float)
    if q.shape != (vectors.shape[1],):
        raise DataError(f"query has dimension {q.shape}, table dimension is {vectors.shape[1]}")
    if not 1 <= k <= len(names):
        raise ValueError(f"k must be in [1, {len(names)}], got {k}")
    sims = _cosine_rows(vectors, q)
    order = np.lexsort((np.asarray(names), -sims))[:k]
    return [Neighbor(int(label_ids[i]), names[i], float(sims[i])) for i in order]


def nearest_labels(table: SemanticTable, query_vector: np.ndarray, k: int) -> list[Neighbor]:
    return rank_by_cosine(table.vectors, table.names, table.label_ids, query_vector, k)
