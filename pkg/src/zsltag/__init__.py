"""Zero-shot multi-label audio tagging: label-first splits, side information,
a joint audio/semantic embedding trained with a ranking loss, and evaluation."""

from zsltag.catalog import Catalog, CatalogStats, catalog_stats, filter_labels, load_catalog
from zsltag.errors import ConfigError, DataError, NumericalError, ZslError
from zsltag.features import extract_mel, fit_standardizer
from zsltag.harness import ExperimentConfig, load_config, run_baseline, run_grid
from zsltag.metrics import EvalReport, evaluate_annotation, evaluate_retrieval
from zsltag.model import EncoderConfig, ModelParams, init_params, load_checkpoint, paper_profile, tiny_profile
from zsltag.sideinfo import SemanticTable, build_attribute_table, build_word_table
from zsltag.split import (
    SetupView,
    SplitManifest,
    coverage_report,
    holdout_validation,
    make_manifest,
    make_setup,
    partition_instances,
    split_labels,
)
from zsltag.synthetic import SyntheticSpec, generate_synthetic
from zsltag.train import TrainConfig, train_classifier, train_embedding

__version__ = "0.1.0"

__all__ = [
    "Catalog", "CatalogStats", "catalog_stats", "filter_labels", "load_catalog",
    "ConfigError", "DataError", "NumericalError", "ZslError",
    "extract_mel", "fit_standardizer",
    "ExperimentConfig", "load_config", "run_baseline", "run_grid",
    "EvalReport", "evaluate_annotation", "evaluate_retrieval",
    "EncoderConfig", "ModelParams", "init_params", "load_checkpoint", "paper_profile", "tiny_profile",
    "SemanticTable", "build_attribute_table", "build_word_table",
    "SetupView", "SplitManifest", "coverage_report", "holdout_validation", "make_manifest", "make_setup",
    "partition_instances", "split_labels",
    "SyntheticSpec", "generate_synthetic",
    "TrainConfig", "train_classifier", "train_embedding",
]
