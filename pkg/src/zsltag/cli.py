"""``zsltag`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure (non-finite loss), 1 any other library error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from zsltag.catalog import catalog_stats, filter_labels, load_allowlist, load_catalog
from zsltag.errors import ConfigError, ZslError
from zsltag.features import FeatureDir, extract_catalog_features, fit_standardizer
from zsltag.harness import (
    ANNOTATION_ORDER,
    RETRIEVAL_ORDER,
    ExperimentConfig,
    annotate,
    checkpoint_features,
    load_config,
    neighbors,
    prepare,
    retrieve,
    run_baseline,
    run_grid,
    train_model,
)
from zsltag.metrics import evaluate_annotation, evaluate_retrieval, reports_to_csv
from zsltag.model import load_checkpoint
from zsltag.sideinfo import SemanticTable, build_attribute_table, build_word_table, load_likelihoods, load_word_vectors
from zsltag.split import SplitManifest, make_manifest, make_setup, parse_setup
from zsltag.synthetic import SyntheticSpec, generate_synthetic
from zsltag.train import TRAIN_PRESETS


def _out(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _catalog(args):
    cat = load_catalog(args.catalog)
    if getattr(args, "allowlist", None):
        cat, _, _ = filter_labels(cat, load_allowlist(args.allowlist))
    return cat


def _run_paths(args) -> dict:
    """Table, split, catalog and feature locations from --run or explicit flags."""
    run = Path(args.run) if args.run else (Path(args.out) if args.out else None)
    if args.config and not args.run:
        run = load_config(args.config, out=args.out).out_dir
    pick = lambda flag, default: getattr(args, flag, None) or (run / default if run else None)  # noqa: E731
    return {
        "catalog": pick("catalog", "catalog.jsonl"),
        "table": pick("table", "semantic"),
        "split": pick("split", "split.json"),
        "features": pick("features", "features"),
    }


def _experiment_config(args) -> ExperimentConfig:
    if args.config:
        return load_config(args.config, seed=args.seed, out=args.out, profile=args.profile)
    p = _run_paths(args)
    if any(v is None for v in p.values()):
        raise ConfigError("give --config, --run DIR, or all of --catalog/--table/--split/--features")
    profile = args.profile or "tiny"
    train = TRAIN_PRESETS[profile]
    if args.seed is not None:
        train = train.with_(seed=args.seed)
    return ExperimentConfig(
        out_dir=Path(args.out or args.run or "."),
        catalog=p["catalog"],
        table=p["table"],
        manifest=p["split"],
        feature_dir=p["features"],
        profile=profile,
        train=train,
    ).validate()


# -- commands --------------------------------------------------------------------


def cmd_synth(args):
    kw = {f.name: getattr(args, f.name) for f in fields(SyntheticSpec) if getattr(args, f.name, None) is not None}
    if args.seed is not None:
        kw["seed"] = args.seed
    data = generate_synthetic(SyntheticSpec(**kw))
    out = _out(args)
    data.save(out)
    m = data.manifest()
    print(f"wrote {out}: {data.catalog.n_instances} instances, |X|={len(m.seen)} |Y|={len(m.unseen)}, "
          f"|A|={len(m.group_a)} |B|={len(m.group_b)} |C|={len(m.group_c)}")


def cmd_split(args):
    cat = _catalog(args)
    m = make_manifest(cat, args.unseen_fraction, 0 if args.seed is None else args.seed)
    if args.out and args.out.endswith(".json"):
        dest = Path(args.out)
        dest.parent.mkdir(parents=True, exist_ok=True)
    else:
        dest = _out(args) / "split.json"
    m.save(dest)
    st = catalog_stats(cat)
    print(f"{st.n_instances} instances, {st.n_labels} labels; |X|={len(m.seen)} |Y|={len(m.unseen)} "
          f"|A|={len(m.group_a)} |B|={len(m.group_b)} |C|={len(m.group_c)} -> {dest}")


def cmd_build_attributes(args):
    cat = _catalog(args)
    table = build_attribute_table(load_likelihoods(args.likelihoods), cat, reduce=args.reduce, standardize=not args.no_standardize)
    out = _out(args)
    table.save(out / "semantic")
    print(f"attribute table: {len(table)} labels x {table.dim} -> {out / 'semantic.json'}")


def cmd_build_words(args):
    cat = _catalog(args)
    table, dropped = build_word_table(cat, load_word_vectors(args.words, keep=cat.label_names), standardize=args.standardize)
    out = _out(args)
    table.save(out / "semantic")
    (out / "dropped_labels.txt").write_text("".join(d + "\n" for d in dropped))
    print(f"word table: {len(table)} labels kept, {len(dropped)} dropped -> {out / 'semantic.json'}")


def _fit_standardizer(cat, split, setup, feature_dir, out):
    view = make_setup(SplitManifest.load(split), cat, *parse_setup(setup), purpose="train")
    feats = FeatureDir(feature_dir)
    st = fit_standardizer(feats[i] for i in view.instance_ids)
    (out / "standardizer.json").write_text(st.to_json() + "\n")
    print(f"standardizer fitted on {st.fitted_on} frames from {len(view.instance_ids)} tracks of {view.name} -> {out / 'standardizer.json'}")


def cmd_features(args):
    cat = _catalog(args)
    out = _out(args)
    split = args.train_manifest or args.split
    if args.action == "fit-standardizer":
        if not split:
            raise ConfigError("fit-standardizer needs --train-manifest")
        _fit_standardizer(cat, split, args.setup, args.features or out / "features", out)
        return
    if not args.audio_root:
        raise ConfigError("feature extraction needs --audio-root")
    n = extract_catalog_features(cat, args.audio_root, out / "features", overwrite=args.overwrite)
    print(f"extracted {n} feature files -> {out / 'features'}")
    if args.fit_standardizer:
        if not split:
            raise ConfigError("--fit-standardizer needs --split")
        _fit_standardizer(cat, split, args.fit_standardizer, out / "features", out)


def cmd_train(args):
    exp = prepare(_experiment_config(args))
    kind = getattr(args, "model", "embedding")
    params, _ = train_model(exp, parse_setup(args.setup), kind)
    print(f"{kind} on {args.setup}: {params.meta.get('epochs_run')} epochs, "
          f"best valid loss {params.meta.get('best_valid_loss'):.5f}")


def cmd_train_baseline(args):
    reports = run_baseline(_experiment_config(args))
    print(reports_to_csv(reports), end="")


def cmd_grid(args):
    res = run_grid(_experiment_config(args))
    print(res.annotation_csv.read_text(), end="")
    print()
    print(res.retrieval_csv.read_text(), end="")


def cmd_eval(args):
    p = _run_paths(args)
    params = load_checkpoint(args.checkpoint)
    cat = load_catalog(p["catalog"])
    manifest = SplitManifest.load(p["split"])
    feats = checkpoint_features(params, FeatureDir(p["features"]))
    table = None if params.meta.get("model") == "classifier" else SemanticTable.load(p["table"])
    train = params.meta.get("train_setup", "")
    tests = [parse_setup(t) for t in args.test] if args.test else list(dict.fromkeys(ANNOTATION_ORDER + RETRIEVAL_ORDER))
    ann, ret = [], []
    for t in tests:
        if t in ANNOTATION_ORDER and args.task in ("annotation", "both"):
            view = make_setup(manifest, cat, *t, purpose="annotation")
            ann.append(evaluate_annotation(params, feats, table, view, train_setup=train))
        if t in RETRIEVAL_ORDER and args.task in ("retrieval", "both"):
            view = make_setup(manifest, cat, *t, purpose="retrieval")
            ret.append(evaluate_retrieval(params, feats, table, view, train_setup=train))
    for reps in (ann, ret):
        if reps:
            print(reports_to_csv(reps))


def _query_inputs(args):
    p = _run_paths(args)
    params = load_checkpoint(args.checkpoint)
    words = load_word_vectors(args.words) if getattr(args, "words", None) else None
    return p, params, SemanticTable.load(p["table"]), words


def cmd_annotate(args):
    p, params, table, _ = _query_inputs(args)
    tags = annotate(params, table, FeatureDir(p["features"]), args.track, SplitManifest.load(p["split"]), args.k, args.labels)
    for rank, t in enumerate(tags, 1):
        print(f"{rank:3d}  {t.score:+.4f}  {t.name}{'  (unseen)' if t.unseen else ''}")


def cmd_retrieve(args):
    p, params, table, words = _query_inputs(args)
    for rank, h in enumerate(retrieve(params, table, FeatureDir(p["features"]), args.query, args.k, words), 1):
        print(f"{rank:3d}  {h.score:+.4f}  {h.instance_id}")


def cmd_neighbors(args):
    _, params, table, words = _query_inputs(args)
    raw, emb = neighbors(params, table, args.query, args.k, words)
    print(f"{'semantic space':<32}  trained embedding space")
    for a, b in zip(raw, emb):
        print(f"{a.name:<24}{a.score:+.3f}  {b.name:<24}{b.score:+.3f}")


# -- parser ----------------------------------------------------------------------


def _with_globals(add_parser, global_args):
    # global flags may also follow the subcommand; SUPPRESS keeps the earlier value when absent
    def add(*a, **kw):
        p = add_parser(*a, **kw)
        global_args(p, argparse.SUPPRESS)
        return p
    return add


def build_parser() -> argparse.ArgumentParser:
    def global_args(p, default=None):
        p.add_argument("--config", default=default, help="experiment TOML file")
        p.add_argument("--seed", type=int, default=default, help="overrides every seed in the config")
        p.add_argument("--out", default=default, help="output directory")
        p.add_argument("--profile", choices=["paper", "tiny"], default=default, help="encoder profile")
        p.add_argument("-v", "--verbose", action="store_true", default=default)

    ap = argparse.ArgumentParser(prog="zsltag", description="Zero-shot multi-label audio tagging toolkit.")
    global_args(ap)
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser = _with_globals(sub.add_parser, global_args)

    def catalog_args(p):
        p.add_argument("--catalog", required=True)
        p.add_argument("--allowlist")

    def run_args(p, catalog=True):
        p.add_argument("--run", help="directory holding catalog.jsonl, semantic.*, split.json and features/")
        if catalog:
            p.add_argument("--catalog")
        p.add_argument("--table", help="semantic table prefix")
        p.add_argument("--split", help="split manifest")
        p.add_argument("--features", help="feature directory")

    p = sub.add_parser("synth", help="generate a planted-structure synthetic dataset")
    for f in fields(SyntheticSpec):
        if f.name != "seed":
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(f.default))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="label-first seen/unseen split and A/B/C partition")
    catalog_args(p)
    p.add_argument("--unseen-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("sideinfo", help="build a semantic table")
    side = p.add_subparsers(dest="sideinfo_command", required=True)
    side.add_parser = _with_globals(side.add_parser, global_args)
    q = side.add_parser("build-attributes", help="attribute vectors from instance-level likelihoods")
    catalog_args(q)
    q.add_argument("--likelihoods", required=True, help="CSV with id,attribute,likelihood")
    q.add_argument("--reduce", choices=["sum", "mean"], default="sum")
    q.add_argument("--no-standardize", action="store_true")
    q.set_defaults(func=cmd_build_attributes)
    q = side.add_parser("build-words", help="word-vector lookup for label names")
    catalog_args(q)
    q.add_argument("--words", required=True, help="text file of 'word v1 ... vd' lines")
    q.add_argument("--standardize", action="store_true")
    q.set_defaults(func=cmd_build_words)

    p = sub.add_parser("features", help="extract log-mel features, or fit a standardizer on existing ones")
    p.add_argument("action", nargs="?", choices=["extract", "fit-standardizer"], default="extract")
    catalog_args(p)
    p.add_argument("--audio-root")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--fit-standardizer", metavar="SETUP", help="also fit a standardizer on a train setup")
    p.add_argument("--split")
    p.add_argument("--train-manifest", help="split manifest for fit-standardizer")
    p.add_argument("--setup", default="(A+B)-X", help="train setup for fit-standardizer")
    p.add_argument("--features", help="feature directory for fit-standardizer (default OUT/features)")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train the embedding model on one train setup")
    run_args(p)
    p.add_argument("--setup", default="(A+B)-X")
    p.add_argument("--model", choices=["embedding", "classifier"], default="embedding")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-baseline", help="embedding vs classifier, trained on A-X, retrieval on B-X")
    run_args(p)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("eval", help="evaluate a checkpoint on annotation and retrieval setups")
    run_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=["annotation", "retrieval", "both"], default="both")
    p.add_argument("--test", action="append", help="restrict to these setups (repeatable)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="full 3 x (6 + 2) experiment grid")
    run_args(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("annotate", help="top-k tags for one track")
    run_args(p, catalog=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--track", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--labels", choices=["Y", "X+Y"], default="X+Y")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("retrieve", help="top-k tracks for a label or word")
    run_args(p, catalog=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--words", help="word-vector file for arbitrary-word queries")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("neighbors", help="nearest labels in semantic vs trained space")
    run_args(p, catalog=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--words")
    p.set_defaults(func=cmd_neighbors)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ZslError as exc:
        print(f"zsltag: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
