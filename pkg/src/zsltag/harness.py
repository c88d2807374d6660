"""Experiment orchestration.

An experiment is described by a TOML file::

    [experiment]
    out = "runs/fma"          # output directory
    profile = "tiny"          # encoder profile: paper | tiny
    seed = 0                  # default for split, train and synthetic seeds

    [data]
    catalog = "catalog.jsonl"
    allowlist = "genres.txt"  # optional

    [sideinfo]                # exactly one of attributes / words / table
    attributes = "openmic.csv"
    reduce = "sum"
    standardize = true

    [split]
    unseen_fraction = 0.2

    [features]                # exactly one of audio_root / dir
    audio_root = "audio"

    [model]                   # optional EncoderConfig overrides
    semantic_activation = "relu"

    [train]                   # optional TrainConfig overrides
    margin = 0.2

    [eval]
    ks = [1, 5, 10]

A ``[synthetic]`` table (SyntheticSpec fields) replaces ``[data]``,
``[sideinfo]`` and ``[features]``. Relative paths resolve against the config
file's directory.

Every stage writes its product under the output directory. Checkpoints carry
a key hashed from everything that determines them, so rerunning a grid
reloads matching models instead of retraining.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import logging
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from zsltag.catalog import Catalog, filter_labels, load_allowlist, load_catalog, normalize_label
from zsltag.errors import ConfigError, DataError, ZslError
from zsltag.features import (
    FeatureDir,
    Standardizer,
    StandardizedFeatures,
    extract_catalog_features,
    fit_standardizer,
    save_feature_dir,
)
from zsltag.metrics import EvalReport, evaluate_annotation, evaluate_retrieval, reports_to_csv, reports_to_json
from zsltag.model import PROFILES, EncoderConfig, ModelParams, load_checkpoint, relevance_matrix, save_checkpoint
from zsltag.sideinfo import (
    Neighbor,
    SemanticTable,
    WordVectors,
    build_attribute_table,
    build_word_table,
    load_likelihoods,
    load_word_vectors,
    nearest_labels,
    rank_by_cosine,
)
from zsltag.split import SplitManifest, make_manifest, make_setup, setup_name
from zsltag.synthetic import SyntheticSpec, generate_synthetic
from zsltag.train import TRAIN_PRESETS, TrainConfig, embed_tracks, project_vectors, train_classifier, train_embedding, write_log

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

TRAIN_ORDER = (("A", "X"), ("B", "X"), ("A+B", "X"))
ANNOTATION_ORDER = (("B", "Y"), ("C", "Y"), ("B+C", "Y"), ("B", "X+Y"), ("C", "X+Y"), ("B+C", "X+Y"))
RETRIEVAL_ORDER = (("B+C", "Y"), ("A+B+C", "Y"))


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: Path
    catalog: Path | None = None
    allowlist: Path | None = None
    attributes: Path | None = None
    words: Path | None = None
    table: Path | None = None
    attribute_reduce: str = "sum"
    standardize_sideinfo: bool | None = None
    unseen_fraction: float = 0.2
    split_seed: int = 0
    manifest: Path | None = None
    audio_root: Path | None = None
    feature_dir: Path | None = None
    synthetic: SyntheticSpec | None = None
    profile: str = "tiny"
    encoder: Mapping = field(default_factory=dict)
    train: TrainConfig = TRAIN_PRESETS["tiny"]
    ks: tuple[int, ...] = (1, 5, 10)

    def validate(self) -> "ExperimentConfig":
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {self.profile!r}")
        side = [n for n in ("attributes", "words", "table") if getattr(self, n) is not None]
        feats = [n for n in ("audio_root", "feature_dir") if getattr(self, n) is not None]
        if self.synthetic is not None:
            extra = side + feats + (["catalog"] if self.catalog else [])
            if extra:
                raise ConfigError(f"[synthetic] supplies data, side information and features; remove {extra}")
        else:
            if self.catalog is None:
                raise ConfigError("data.catalog is required")
            if len(side) != 1:
                raise ConfigError(f"exactly one side-information source is required, got {side or 'none'}")
            if len(feats) != 1:
                raise ConfigError(f"exactly one feature source is required, got {feats or 'none'}")
        if self.synthetic is not None and self.manifest is not None:
            raise ConfigError("[synthetic] designates its own split; remove split.manifest")
        for name in ("catalog", "allowlist", "attributes", "words", "manifest", "audio_root", "feature_dir"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{name}: path does not exist: {p}")
        if self.table is not None and not Path(self.table).with_suffix(".json").exists():
            raise ConfigError(f"table: {Path(self.table).with_suffix('.json')} does not exist")
        if self.attribute_reduce not in ("sum", "mean"):
            raise ConfigError("sideinfo.reduce must be 'sum' or 'mean'")
        if not 0 < self.unseen_fraction < 1:
            raise ConfigError("split.unseen_fraction must be in (0, 1)")
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("eval.ks must be positive integers")
        bad = set(self.encoder) - {f.name for f in fields(EncoderConfig)}
        if bad:
            raise ConfigError(f"unknown [model] keys {sorted(bad)}")
        return self

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Path):
                v = str(v)
            elif isinstance(v, (TrainConfig, SyntheticSpec)):
                v = asdict(v)
            elif isinstance(v, Mapping):
                v = dict(v)
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out


_SCHEMA = {
    "experiment": {"out", "profile", "seed"},
    "data": {"catalog", "allowlist"},
    "sideinfo": {"attributes", "words", "table", "reduce", "standardize"},
    "split": {"unseen_fraction", "seed", "manifest"},
    "features": {"audio_root", "dir"},
    "synthetic": {f.name for f in fields(SyntheticSpec)},
    "model": {f.name for f in fields(EncoderConfig)},
    "train": {f.name for f in fields(TrainConfig)},
    "eval": {"ks"},
}


def config_from_dict(
    raw: Mapping, base_dir=".", *, seed: int | None = None, out=None, profile: str | None = None
) -> ExperimentConfig:
    """Build a config from parsed TOML; keyword arguments override file values."""
    with stage("config"):
        return _config_from_dict(raw, base_dir, seed, out, profile)


def _config_from_dict(raw, base_dir, seed, out, profile) -> ExperimentConfig:
    for section, body in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, Mapping):
            raise ConfigError(f"[{section}] must be a table")
        unknown = set(body) - _SCHEMA[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    base = Path(base_dir)
    get = lambda s, k, d=None: raw.get(s, {}).get(k, d)  # noqa: E731

    def path(s, k):
        v = get(s, k)
        return None if v is None else (base / v)

    exp_seed = int(seed if seed is not None else get("experiment", "seed", 0))
    # an explicit --seed beats per-section seeds; otherwise sections may pin their own
    pick = (lambda s: exp_seed) if seed is not None else (lambda s: int(get(s, "seed", exp_seed)))
    profile = profile or get("experiment", "profile", "tiny")
    out_dir = Path(out) if out is not None else path("experiment", "out")
    if out_dir is None:
        raise ConfigError("an output directory is required ([experiment] out or --out)")

    train_kw = dict(raw.get("train", {}))
    train_kw["seed"] = pick("train")
    try:
        train = replace(TRAIN_PRESETS.get(profile, TRAIN_PRESETS["tiny"]), **train_kw)
        synthetic = None
        if "synthetic" in raw:
            synthetic = SyntheticSpec(**{**raw["synthetic"], "seed": pick("synthetic")})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

    return ExperimentConfig(
        out_dir=out_dir,
        catalog=path("data", "catalog"),
        allowlist=path("data", "allowlist"),
        attributes=path("sideinfo", "attributes"),
        words=path("sideinfo", "words"),
        table=path("sideinfo", "table"),
        attribute_reduce=get("sideinfo", "reduce", "sum"),
        standardize_sideinfo=get("sideinfo", "standardize"),
        unseen_fraction=float(get("split", "unseen_fraction", 0.2)),
        split_seed=pick("split"),
        manifest=path("split", "manifest"),
        audio_root=path("features", "audio_root"),
        feature_dir=path("features", "dir"),
        synthetic=synthetic,
        profile=profile,
        encoder=dict(raw.get("model", {})),
        train=train,
        ks=tuple(int(k) for k in get("eval", "ks", (1, 5, 10))),
    ).validate()


def load_config(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw, path.parent, **overrides)


# -- stages ----------------------------------------------------------------------


@contextmanager
def stage(name: str):
    """Re-raise library errors with the failing stage named."""
    try:
        yield
    except ZslError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc
    except OSError as exc:
        raise DataError(f"[{name}] {exc}") from exc


@dataclass
class Experiment:
    config: ExperimentConfig
    catalog: Catalog
    table: SemanticTable
    manifest: SplitManifest
    features: Mapping[str, np.ndarray]
    features_key: str

    @property
    def out(self) -> Path:
        return self.config.out_dir


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()


def table_hash(table: SemanticTable) -> str:
    h = hashlib.sha256(json.dumps([table.kind, list(table.label_ids), list(table.names)]).encode())
    h.update(np.ascontiguousarray(table.vectors, dtype="<f8").tobytes())
    return h.hexdigest()


def _dir_key(root: Path) -> str:
    entries = [(p.name, p.stat().st_size, p.stat().st_mtime_ns) for p in sorted(root.glob("*.zstf"))]
    return _digest(entries)


def _semantic_table(config: ExperimentConfig, catalog: Catalog) -> tuple[Catalog, SemanticTable]:
    if config.attributes is not None:
        lik = load_likelihoods(config.attributes)
        std = True if config.standardize_sideinfo is None else config.standardize_sideinfo
        return catalog, build_attribute_table(lik, catalog, reduce=config.attribute_reduce, standardize=std)
    if config.words is not None:
        raw = load_word_vectors(config.words, keep=catalog.label_names)
        table, dropped = build_word_table(catalog, raw, standardize=bool(config.standardize_sideinfo))
        if dropped:
            logger.info("dropping %d labels without word vectors", len(dropped))
            catalog, _, _ = filter_labels(catalog, table.names)
        return catalog, table
    table = SemanticTable.load(config.table)
    present = [n for n in catalog.label_names if table.find(n) is not None]
    if not present:
        raise DataError("no catalog label appears in the semantic table")
    if len(present) < catalog.n_labels:
        catalog, _, _ = filter_labels(catalog, present)
    for lid, name in zip(catalog.label_ids, catalog.label_names):
        if table.find(name) != lid:
            raise DataError(f"semantic table assigns a different id to label {name!r}; rebuild it from this catalog")
    return catalog, table


def prepare(config: ExperimentConfig) -> Experiment:
    """Load or build the catalog, semantic table, split and features."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")

    if config.synthetic is not None:
        with stage("synthetic"):
            data = generate_synthetic(config.synthetic)
            catalog, table, manifest = data.catalog, data.table, data.manifest()
            features_key = _digest(asdict(config.synthetic))
            # stored once per spec; training always reads the float32 files
            marker = out / "features" / "synthetic.json"
            if not marker.exists() or marker.read_text() != features_key:
                save_feature_dir(out / "features", data.features, {"source": "synthetic"})
                marker.write_text(features_key)
            features = FeatureDir(out / "features")
    else:
        with stage("catalog"):
            catalog = load_catalog(config.catalog)
            if config.allowlist is not None:
                catalog, _, _ = filter_labels(catalog, load_allowlist(config.allowlist))
        with stage("sideinfo"):
            catalog, table = _semantic_table(config, catalog)
        with stage("split"):
            if config.manifest is not None:
                manifest = SplitManifest.load(config.manifest)
                if manifest.catalog_hash != catalog.content_hash():
                    raise DataError(f"{config.manifest} was made for a different catalog")
            else:
                manifest = make_manifest(catalog, config.unseen_fraction, config.split_seed)
        with stage("features"):
            if config.audio_root is not None:
                feature_root = out / "features"
                n = extract_catalog_features(catalog, config.audio_root, feature_root)
                logger.info("extracted %d feature files", n)
            else:
                feature_root = Path(config.feature_dir)
            features = FeatureDir(feature_root)
            missing = [i for i in catalog.instance_ids if i not in features]
            if missing:
                raise DataError(f"{len(missing)} catalog instances have no features, e.g. {missing[:3]}")
            features_key = _dir_key(feature_root)

    with stage("catalog"):
        if config.catalog is None or Path(config.catalog).resolve() != (out / "catalog.jsonl").resolve():
            catalog.save_jsonl(out / "catalog.jsonl")
    with stage("split"):
        manifest.save(out / "split.json")
    with stage("sideinfo"):
        table.save(out / "semantic")
    return Experiment(config, catalog, table, manifest, features, features_key)


def _slug(setup: str) -> str:
    return setup.replace("(", "").replace(")", "").replace("+", "")


def _encoder(exp: Experiment, semantic_dim: int, n_classes: int = 0) -> EncoderConfig:
    bins = exp.features[exp.catalog.instance_ids[0]].shape[1]
    base = PROFILES[exp.config.profile](semantic_dim=semantic_dim, input_bins=bins, n_classes=n_classes)
    try:
        return replace(base, **{**exp.config.encoder, "semantic_dim": semantic_dim, "input_bins": bins, "n_classes": n_classes})
    except TypeError as exc:
        raise ConfigError(f"[model] {exc}") from None


def train_model(exp: Experiment, train_setup: tuple[str, str], kind: str = "embedding") -> tuple[ModelParams, Standardizer]:
    """Train (or reload a matching checkpoint for) one model on a train setup.

    The returned parameters are always the float32 values stored in the
    checkpoint, so fresh and resumed runs evaluate identically.
    """
    name = setup_name(*train_setup)
    with stage(f"train {name}"):
        view = make_setup(exp.manifest, exp.catalog, *train_setup, purpose="train")
        if kind == "embedding":
            encoder = _encoder(exp, exp.table.dim)
        elif kind == "classifier":
            encoder = _encoder(exp, 1, n_classes=len(view.label_ids))
        else:
            raise ConfigError(f"unknown model kind {kind!r}")
        key = _digest({
            "kind": kind,
            "setup": name,
            "encoder": asdict(encoder),
            "train": asdict(exp.config.train),
            "split": exp.manifest.to_json(),
            "table": table_hash(exp.table) if kind == "embedding" else None,
            "features": exp.features_key,
        })
        ckpt = exp.out / "models" / f"{_slug(name)}-{kind}.ckpt"
        if ckpt.exists():
            params = load_checkpoint(ckpt)
            if params.meta.get("key") == key:
                logger.info("reusing %s", ckpt)
                return params, Standardizer.from_json(json.dumps(params.meta["standardizer"]))
        standardizer = fit_standardizer(exp.features[i] for i in view.instance_ids)
        feats = StandardizedFeatures(exp.features, standardizer)
        if kind == "embedding":
            params, log = train_embedding(view, exp.table, feats, exp.config.train, encoder)
        else:
            params, log = train_classifier(view, feats, exp.config.train, encoder)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        (exp.out / "logs").mkdir(exist_ok=True)
        write_log(exp.out / "logs" / f"{_slug(name)}-{kind}.jsonl", log)
        save_checkpoint(ckpt, params, key=key, standardizer=json.loads(standardizer.to_json()))
        return load_checkpoint(ckpt), standardizer


@dataclass
class GridResult:
    annotation: list[EvalReport]
    retrieval: list[EvalReport]
    out_dir: Path

    @property
    def annotation_csv(self) -> Path:
        return self.out_dir / "annotation.csv"

    @property
    def retrieval_csv(self) -> Path:
        return self.out_dir / "retrieval.csv"


def evaluate_model(exp: Experiment, params: ModelParams, standardizer: Standardizer, train_name: str):
    feats = StandardizedFeatures(exp.features, standardizer)
    annotation, retrieval = [], []
    for test in ANNOTATION_ORDER:
        with stage(f"eval {train_name} on {setup_name(*test)}"):
            view = make_setup(exp.manifest, exp.catalog, *test, purpose="annotation")
            annotation.append(evaluate_annotation(params, feats, exp.table, view, exp.config.ks, train_name))
    for test in RETRIEVAL_ORDER:
        with stage(f"eval {train_name} on {setup_name(*test)}"):
            view = make_setup(exp.manifest, exp.catalog, *test, purpose="retrieval")
            retrieval.append(evaluate_retrieval(params, feats, exp.table, view, train_name))
    return annotation, retrieval


def run_grid(config: ExperimentConfig) -> GridResult:
    """Train on every train setup and evaluate on every annotation and retrieval setup."""
    exp = prepare(config)
    annotation, retrieval = [], []
    for train in TRAIN_ORDER:
        params, standardizer = train_model(exp, train)
        a, r = evaluate_model(exp, params, standardizer, setup_name(*train))
        annotation += a
        retrieval += r
    out = exp.out
    (out / "annotation.csv").write_text(reports_to_csv(annotation))
    (out / "retrieval.csv").write_text(reports_to_csv(retrieval))
    (out / "reports.json").write_text(reports_to_json(annotation + retrieval) + "\n")
    return GridResult(annotation, retrieval, out)


def run_baseline(config: ExperimentConfig) -> list[EvalReport]:
    """Embedding model vs. seen-label classifier, both trained on A-X, retrieval on B-X."""
    exp = prepare(config)
    with stage("eval B-X"):
        test = make_setup(exp.manifest, exp.catalog, "B", "X")
    reports = []
    for kind in ("embedding", "classifier"):
        params, standardizer = train_model(exp, ("A", "X"), kind)
        feats = StandardizedFeatures(exp.features, standardizer)
        with stage(f"eval {kind} on B-X"):
            table = exp.table if kind == "embedding" else None
            reports.append(evaluate_retrieval(params, feats, table, test, "A-X", strict=False))
    (exp.out / "baseline.csv").write_text(reports_to_csv(reports))
    (exp.out / "baseline.json").write_text(reports_to_json(reports) + "\n")
    return reports


# -- qualitative queries ---------------------------------------------------------


class Tag(NamedTuple):
    label_id: int
    name: str
    score: float
    unseen: bool


class Hit(NamedTuple):
    instance_id: str
    score: float


def checkpoint_features(params: ModelParams, features: Mapping[str, np.ndarray]) -> Mapping[str, np.ndarray]:
    """Apply the standardizer stored in a checkpoint, if any."""
    std = params.meta.get("standardizer")
    return features if std is None else StandardizedFeatures(features, Standardizer.from_json(json.dumps(std)))


def annotate(
    params: ModelParams,
    table: SemanticTable,
    features: Mapping[str, np.ndarray],
    track_id: str,
    manifest: SplitManifest,
    k: int = 10,
    label_group: str = "X+Y",
) -> list[Tag]:
    """Top-k labels of the chosen group for one track, marked seen or unseen."""
    if track_id not in features:
        raise DataError(f"unknown track {track_id!r}")
    candidates = sorted(manifest.labels(label_group) & set(table.label_ids))
    emb = embed_tracks(params, checkpoint_features(params, features), [track_id])
    scores = relevance_matrix(emb, project_vectors(params, table.rows(candidates)))[0]
    order = sorted(range(len(candidates)), key=lambda j: (-scores[j], candidates[j]))[:k]
    return [Tag(candidates[j], table.name(candidates[j]), float(scores[j]), candidates[j] in manifest.unseen) for j in order]


def _query_vector(table: SemanticTable, query: str, words: WordVectors | None) -> np.ndarray:
    lid = table.find(query)
    if lid is None:
        lid = table.find(normalize_label(query))
    if lid is not None:
        return table.vector(lid)
    if words is not None:
        for w in (query, query.lower()):
            if w in words:
                if words.dim != table.dim:
                    raise DataError(f"word vectors have dimension {words.dim}, the model expects {table.dim}")
                return words[w]
    vocab = list(table.names) + (list(words.words) if words is not None else [])
    close = difflib.get_close_matches(query.lower(), vocab, n=5)
    raise DataError(f"{query!r} is out of vocabulary; nearest entries: {', '.join(close) or '(none)'}")


def retrieve(
    params: ModelParams,
    table: SemanticTable,
    features: Mapping[str, np.ndarray],
    query: str,
    k: int = 5,
    words: WordVectors | None = None,
    track_ids: Sequence[str] | None = None,
) -> list[Hit]:
    """Top-k tracks for a label name or, with ``words``, any in-vocabulary word."""
    q = _query_vector(table, query, words)
    ids = sorted(features) if track_ids is None else list(track_ids)
    emb = embed_tracks(params, checkpoint_features(params, features), ids)
    scores = relevance_matrix(emb, project_vectors(params, q))[:, 0]
    order = sorted(range(len(ids)), key=lambda j: (-scores[j], ids[j]))[:k]
    return [Hit(ids[j], float(scores[j])) for j in order]


def neighbors(
    params: ModelParams, table: SemanticTable, query: str, k: int = 10, words: WordVectors | None = None
) -> tuple[list[Neighbor], list[Neighbor]]:
    """Nearest labels to ``query`` in the raw semantic space and in the trained embedding space."""
    q = _query_vector(table, query, words)
    raw = nearest_labels(table, q, k)
    projected = rank_by_cosine(project_vectors(params, table.vectors), table.names, table.label_ids, project_vectors(params, q)[0], k)
    return raw, projected
