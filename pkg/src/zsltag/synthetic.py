"""Planted-structure synthetic datasets for desk-scale experiments.

Seen-label semantic prototypes are Gaussian; each unseen prototype is a
Dirichlet-weighted convex combination of a few seen ones. A fixed random
linear map takes semantic prototypes to feature space, where each label's
feature prototype is rescaled to unit RMS so unseen labels are not drowned
out by co-occurring seen ones. An instance's frames are the sum of its
labels' feature prototypes plus a per-track offset and per-frame Gaussian
noise, both scaled by ``noise``.

Two optional knobs make the task harder. ``parent_link`` is the chance that
a track carrying an unseen label also carries one of that label's seen
parents. ``novelty`` mixes label-specific audio that the semantic map cannot
predict into every feature prototype. Both default to zero, which leaves
the generated data identical to the plain generator.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from zsltag.catalog import Catalog
from zsltag.errors import ConfigError, DataError
from zsltag.features import save_feature_dir
from zsltag.sideinfo import SemanticTable
from zsltag.split import SplitManifest, partition_instances

_MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class SyntheticSpec:
    n_labels: int = 30
    n_unseen: int = 6
    n_instances: int = 1000
    feature_dim: int = 32
    semantic_dim: int = 16
    cardinality: float = 2.0
    noise: float = 1.0
    n_frames: int = 130
    parents: int = 2
    parent_link: float = 0.0
    novelty: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_unseen < self.n_labels:
            raise ConfigError("need 1 <= n_unseen < n_labels")
        if self.cardinality < 1:
            raise ConfigError("cardinality must be >= 1")
        if self.cardinality > self.n_labels:
            raise ConfigError("cardinality cannot exceed n_labels")
        if min(self.n_instances, self.feature_dim, self.semantic_dim, self.n_frames, self.parents) < 1:
            raise ConfigError("sizes must be positive")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.novelty < 0:
            raise ConfigError("novelty must be non-negative")
        if not 0 <= self.parent_link <= 1:
            raise ConfigError("parent_link must lie in [0, 1]")


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    catalog: Catalog
    table: SemanticTable
    features: dict[str, np.ndarray]
    unseen: frozenset[int]

    def manifest(self) -> SplitManifest:
        seen = frozenset(self.catalog.label_ids) - self.unseen
        return partition_instances(self.catalog, seen, self.unseen, seed=self.spec.seed)

    def save(self, root) -> None:
        """Write ``catalog.jsonl``, ``semantic.{json,f32}``, ``split.json`` and ``features/``."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        self.catalog.save_jsonl(root / "catalog.jsonl")
        self.table.save(root / "semantic")
        self.manifest().save(root / "split.json")
        save_feature_dir(root / "features", self.features, {"source": "synthetic", **asdict(self.spec)})


def _unit_rms(m):
    return m * np.sqrt(m.shape[1]) / np.linalg.norm(m, axis=1, keepdims=True)


def _link_parents(labels, parent_of, p, rng):
    """With probability ``p`` per unseen label, also tag one of its seen parents."""
    out = set(labels.tolist())
    for u in labels:
        if p > 0 and u in parent_of and rng.random() < p:
            out.add(int(rng.choice(parent_of[u])))
    return np.array(sorted(out))


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    rng = np.random.default_rng(spec.seed)
    n_seen = spec.n_labels - spec.n_unseen
    parents = min(spec.parents, n_seen)

    unseen_idx = np.sort(rng.choice(spec.n_labels, size=spec.n_unseen, replace=False))
    is_unseen = np.zeros(spec.n_labels, bool)
    is_unseen[unseen_idx] = True
    seen_idx = np.flatnonzero(~is_unseen)

    protos = np.zeros((spec.n_labels, spec.semantic_dim))
    protos[seen_idx] = rng.normal(size=(n_seen, spec.semantic_dim))
    parent_of = {}
    for u in unseen_idx:
        parent_of[u] = rng.choice(seen_idx, size=parents, replace=False)
        protos[u] = rng.dirichlet(np.ones(parents)) @ protos[parent_of[u]]

    mapping = rng.normal(size=(spec.semantic_dim, spec.feature_dim)) / np.sqrt(spec.semantic_dim)
    feat_protos = _unit_rms(protos @ mapping)
    if spec.novelty > 0:
        # label-specific audio the semantic vectors cannot predict; separate stream keeps novelty=0 datasets unchanged
        own = np.random.default_rng([spec.seed, 2]).normal(size=feat_protos.shape)
        feat_protos = _unit_rms(feat_protos + spec.novelty * _unit_rms(own))

    for _ in range(_MAX_ATTEMPTS):
        extra = rng.poisson(spec.cardinality - 1.0, size=spec.n_instances)
        sizes = np.minimum(1 + extra, spec.n_labels)
        label_sets = [_link_parents(rng.choice(spec.n_labels, size=k, replace=False), parent_of, spec.parent_link, rng)
                      for k in sizes]
        has_x = np.array([(~is_unseen[s]).any() for s in label_sets])
        has_y = np.array([is_unseen[s].any() for s in label_sets])
        used = np.zeros(spec.n_labels, bool)
        for s in label_sets:
            used[s] = True
        if (has_x & ~has_y).any() and (has_x & has_y).any() and (~has_x & has_y).any() and used.all():
            break
    else:
        raise DataError(f"could not populate groups A, B and C in {_MAX_ATTEMPTS} draws; spec infeasible")

    width = len(str(spec.n_labels - 1))
    names = [f"tag{k:0{width}d}" for k in range(spec.n_labels)]
    iwidth = len(str(spec.n_instances - 1))
    ids = [f"syn{k:0{iwidth}d}" for k in range(spec.n_instances)]

    features = {}
    for iid, s in zip(ids, label_sets):
        base = feat_protos[s].sum(axis=0)
        offset = rng.normal(size=spec.feature_dim)
        frame_noise = rng.normal(size=(spec.n_frames, spec.feature_dim))
        features[iid] = base + spec.noise * (0.5 * offset + frame_noise)

    catalog = Catalog.from_records((iid, [names[k] for k in s], None) for iid, s in zip(ids, label_sets))
    if catalog.n_labels != spec.n_labels:
        raise DataError("synthetic catalog lost labels")
    table = SemanticTable("synthetic", catalog.label_ids, catalog.label_names, protos.copy())
    unseen = frozenset(catalog.label_id(names[u]) for u in unseen_idx)
    return SyntheticData(spec, catalog, table, features, unseen)
