"""Label-first split into seen/unseen labels and the A/B/C instance partition.

Labels are split first into seen (X) and unseen (Y). Every instance then falls
into exactly one group, decided by where its positive labels lie:

    A   positives in X only
    B   positives in both X and Y
    C   positives in Y only

Train, annotation-test and retrieval-test setups are unions of these groups
crossed with X, Y or X+Y.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from zsltag.catalog import Catalog
from zsltag.errors import ConfigError, DataError

INSTANCE_GROUPS = ("A", "B", "C")
LABEL_GROUPS = ("X", "Y")

TRAIN_SETUPS = frozenset({("A", "X"), ("B", "X"), ("A+B", "X")})
ANNOTATION_SETUPS = frozenset(
    (i, l) for i in ("B", "C", "B+C") for l in ("Y", "X+Y")
)
RETRIEVAL_SETUPS = frozenset({("B+C", "Y"), ("A+B+C", "Y")})
SETUPS = {"train": TRAIN_SETUPS, "annotation": ANNOTATION_SETUPS, "retrieval": RETRIEVAL_SETUPS}


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _canonical_group(group: str, alphabet: tuple[str, ...]) -> str:
    parts = [p for p in group.replace("(", "").replace(")", "").replace(" ", "").upper().split("+") if p]
    if not parts or any(p not in alphabet for p in parts) or len(set(parts)) != len(parts):
        raise ConfigError(f"invalid group {group!r}; expected a '+'-joined subset of {alphabet}")
    return "+".join(sorted(parts))


def parse_setup(name: str) -> tuple[str, str]:
    """``"(A+B)-X"`` -> ``("A+B", "X")``."""
    inst, sep, lab = name.replace(" ", "").rpartition("-")
    if not sep:
        raise ConfigError(f"setup name {name!r} must look like 'A-X' or '(B+C)-(X+Y)'")
    return _canonical_group(inst, INSTANCE_GROUPS), _canonical_group(lab, LABEL_GROUPS)


def setup_name(instance_group: str, label_group: str) -> str:
    wrap = lambda g: f"({g})" if "+" in g else g  # noqa: E731
    return f"{wrap(instance_group)}-{wrap(label_group)}"


@dataclass(frozen=True)
class SplitManifest:
    seen: frozenset[int]
    unseen: frozenset[int]
    group_a: frozenset[str]
    group_b: frozenset[str]
    group_c: frozenset[str]
    seed: int | None
    catalog_hash: str

    def labels(self, label_group: str) -> frozenset[int]:
        g = _canonical_group(label_group, LABEL_GROUPS)
        out: frozenset[int] = frozenset()
        for part in g.split("+"):
            out |= self.seen if part == "X" else self.unseen
        return out

    def instances(self, instance_group: str) -> frozenset[str]:
        g = _canonical_group(instance_group, INSTANCE_GROUPS)
        groups = {"A": self.group_a, "B": self.group_b, "C": self.group_c}
        out: frozenset[str] = frozenset()
        for part in g.split("+"):
            out |= groups[part]
        return out

    def to_json(self) -> str:
        obj = {
            "seed": self.seed,
            "catalog_hash": self.catalog_hash,
            "X": sorted(self.seen),
            "Y": sorted(self.unseen),
            "A": sorted(self.group_a),
            "B": sorted(self.group_b),
            "C": sorted(self.group_c),
        }
        return json.dumps(obj, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        try:
            obj = json.loads(text)
            return cls(
                seen=frozenset(int(x) for x in obj["X"]),
                unseen=frozenset(int(x) for x in obj["Y"]),
                group_a=frozenset(obj["A"]),
                group_b=frozenset(obj["B"]),
                group_c=frozenset(obj["C"]),
                seed=obj.get("seed"),
                catalog_hash=obj.get("catalog_hash", ""),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"malformed split manifest ({exc})") from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def split_labels(catalog: Catalog, unseen_fraction: float, seed: int) -> tuple[frozenset[int], frozenset[int]]:
    """Uniform random label split; ``|Y| = round(unseen_fraction * n_labels)``."""
    if not 0.0 < unseen_fraction < 1.0:
        raise ConfigError(f"unseen_fraction must be in (0, 1), got {unseen_fraction}")
    n = catalog.n_labels
    if n < 2:
        raise DataError("need at least two labels to split")
    n_unseen = min(max(round_half_up(unseen_fraction * n), 1), n - 1)
    rng = np.random.default_rng(seed)
    order = rng.permutation(np.array(sorted(catalog.label_ids)))
    unseen = frozenset(int(x) for x in order[:n_unseen])
    seen = frozenset(catalog.label_ids) - unseen
    return seen, unseen


def partition_instances(
    catalog: Catalog, seen, unseen, seed: int | None = None
) -> SplitManifest:
    seen, unseen = frozenset(seen), frozenset(unseen)
    if seen & unseen or (seen | unseen) != frozenset(catalog.label_ids):
        raise DataError("seen and unseen labels must partition the catalog labels")
    in_y = np.array([lid in unseen for lid in catalog.label_ids], dtype=np.int64)
    m = catalog.matrix
    n_y = m @ in_y
    n_x = np.diff(m.indptr) - n_y
    ids = np.array(catalog.instance_ids, dtype=object)
    return SplitManifest(
        seen=seen,
        unseen=unseen,
        group_a=frozenset(ids[(n_x > 0) & (n_y == 0)]),
        group_b=frozenset(ids[(n_x > 0) & (n_y > 0)]),
        group_c=frozenset(ids[(n_x == 0) & (n_y > 0)]),
        seed=seed,
        catalog_hash=catalog.content_hash(),
    )


def make_manifest(catalog: Catalog, unseen_fraction: float, seed: int) -> SplitManifest:
    seen, unseen = split_labels(catalog, unseen_fraction, seed)
    return partition_instances(catalog, seen, unseen, seed=seed)


@dataclass(frozen=True, eq=False)
class SetupView:
    """One (instance group, label group) cell of the split.

    ``matrix`` is the catalog annotation matrix restricted to the view's rows
    and columns (dense int8). ``purposes`` lists the roles this combination
    may play: any of ``"train"``, ``"annotation"``, ``"retrieval"``.
    """

    instance_group: str
    label_group: str
    instance_ids: tuple[str, ...]
    label_ids: tuple[int, ...]
    matrix: np.ndarray
    purposes: frozenset[str]

    @property
    def name(self) -> str:
        return setup_name(self.instance_group, self.label_group)

    def allows(self, purpose: str) -> bool:
        return purpose in self.purposes

    def __repr__(self) -> str:
        return f"SetupView({self.name}, {len(self.instance_ids)} instances, {len(self.label_ids)} labels)"


def make_setup(
    manifest: SplitManifest,
    catalog: Catalog,
    instance_group: str,
    label_group: str,
    purpose: str | None = None,
) -> SetupView:
    """Resolve a setup such as ``("A+B", "X")``.

    With ``purpose`` given, the combination must be valid for that role;
    retrieval on C-Y is rejected because unseen labels are not guaranteed a
    positive instance in C.
    """
    key = (_canonical_group(instance_group, INSTANCE_GROUPS), _canonical_group(label_group, LABEL_GROUPS))
    purposes = frozenset(p for p, combos in SETUPS.items() if key in combos)
    if purpose is not None:
        if purpose not in SETUPS:
            raise ConfigError(f"unknown purpose {purpose!r}")
        if purpose not in purposes:
            hint = ""
            if key == ("C", "Y") and purpose == "retrieval":
                hint = " (C-Y cannot be formed for retrieval: unseen labels may have no positive in C)"
            raise ConfigError(f"{setup_name(*key)} is not a valid {purpose} setup{hint}")
    elif not purposes:
        raise ConfigError(f"{setup_name(*key)} is not one of the defined setups")
    inst = manifest.instances(key[0])
    labs = manifest.labels(key[1])
    instance_ids = tuple(i for i in catalog.instance_ids if i in inst)
    label_ids = tuple(l for l in catalog.label_ids if l in labs)
    matrix = catalog.submatrix(instance_ids, label_ids).astype(np.int8)
    matrix.setflags(write=False)
    return SetupView(key[0], key[1], instance_ids, label_ids, matrix, purposes)


def holdout_validation(view: SetupView, fraction: float, seed: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Random validation holdout drawn from a train setup; both parts keep view order."""
    if not view.allows("train"):
        raise ConfigError(f"{view.name} is not a train setup")
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"holdout fraction must be in (0, 1), got {fraction}")
    n = len(view.instance_ids)
    n_valid = round_half_up(fraction * n)
    if n_valid < 1 or n_valid >= n:
        raise DataError(f"cannot hold out {fraction} of {n} instances and keep both parts non-empty")
    rng = np.random.default_rng(seed)
    picked = set(rng.choice(n, size=n_valid, replace=False).tolist())
    train = tuple(i for k, i in enumerate(view.instance_ids) if k not in picked)
    valid = tuple(i for k, i in enumerate(view.instance_ids) if k in picked)
    return train, valid


class LabelCoverage(NamedTuple):
    label_id: int
    n_positives: int
    excluded: bool


def coverage_report(view: SetupView) -> list[LabelCoverage]:
    """Positive count per label inside the view; zero-positive labels are marked excluded."""
    counts = view.matrix.sum(axis=0, dtype=np.int64) if view.instance_ids else np.zeros(len(view.label_ids), int)
    return [LabelCoverage(lid, int(c), int(c) == 0) for lid, c in zip(view.label_ids, counts)]
