"""Qualitative queries against a trained checkpoint.

Run 04_train_and_evaluate.py first. Tags for one track, tracks for one label,
and the label neighbourhood before and after training.

    python demos/05_queries.py [run_dir]
"""

import sys
from pathlib import Path

from zsltag.catalog import load_catalog
from zsltag.features import FeatureDir
from zsltag.harness import annotate, neighbors, retrieve
from zsltag.model import load_checkpoint
from zsltag.sideinfo import SemanticTable
from zsltag.split import SplitManifest

run = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_runs/grid")
params = load_checkpoint(run / "models" / "AB-X-embedding.ckpt")
table = SemanticTable.load(run / "semantic")
feats = FeatureDir(run / "features")
manifest = SplitManifest.load(run / "split.json")
cat = load_catalog(run / "catalog.jsonl")

track = sorted(manifest.group_c)[0]
truth = sorted(cat.label_name(l) for l in cat.positives(track))
print(f"track {track}, true tags {truth}")
for t in annotate(params, table, feats, track, manifest, k=5):
    print(f"  {t.score:+.3f}  {t.name}{'  (unseen)' if t.unseen else ''}")

label = cat.label_name(sorted(manifest.unseen)[0])
positives = {i for i in cat.instance_ids if cat.label_id(label) in cat.positives(i)}
print(f"\nunseen label {label}: {len(positives)} tracks carry it")
for h in retrieve(params, table, feats, label, k=5):
    print(f"  {h.score:+.3f}  {h.instance_id}{'  *' if h.instance_id in positives else ''}")

raw, emb = neighbors(params, table, label, k=5)
print(f"\nneighbours of {label}")
print(f"  {'semantic space':<22}trained space")
for a, b in zip(raw, emb):
    print(f"  {a.name:<8}{a.score:+.3f}      {b.name:<8}{b.score:+.3f}")
