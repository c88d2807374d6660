"""Label-first split on a toy catalog.

Labels are divided into seen (X) and unseen (Y) first; tracks then fall into
A (seen labels only), B (both kinds) or C (unseen labels only). Every train
and test setup is a (track group, label group) cell of that picture.
"""

import numpy as np

from zsltag.catalog import Catalog, catalog_stats
from zsltag.split import coverage_report, make_manifest, make_setup

cat = Catalog.from_records([
    ("t01", ["rock"], None),
    ("t02", ["rock", "punk"], None),
    ("t03", ["punk"], None),
    ("t04", ["jazz", "bebop"], None),
    ("t05", ["jazz"], None),
    ("t06", ["bebop"], None),
    ("t07", ["rock", "jazz"], None),
    ("t08", ["blues"], None),
    ("t09", ["blues", "rock"], None),
    ("t10", ["punk", "blues"], None),
])
st = catalog_stats(cat)
print(f"{st.n_instances} tracks, {st.n_labels} labels, {st.label_cardinality:.2f} labels per track")

m = make_manifest(cat, unseen_fraction=0.4, seed=3)
name = cat.label_name
print("seen   X:", sorted(name(l) for l in m.seen))
print("unseen Y:", sorted(name(l) for l in m.unseen))
for g in "ABC":
    print(f"group {g}:", sorted(m.instances(g)))

# the restricted annotation matrix of a setup is just the catalog masked to its rows and columns
view = make_setup(m, cat, "A+B", "X", purpose="train")
print()
print(view)
print("labels:", [name(l) for l in view.label_ids])
print(view.matrix)

# unseen labels with no positive in a retrieval set are excluded from label-averaged metrics
for test in [("B+C", "Y"), ("A+B+C", "Y")]:
    v = make_setup(m, cat, *test, purpose="retrieval")
    print(v.name, [(name(c.label_id), c.n_positives) for c in coverage_report(v)])

# C-Y works for annotation but is rejected as a retrieval setup
try:
    make_setup(m, cat, "C", "Y", purpose="retrieval")
except Exception as exc:
    print(type(exc).__name__, exc)

# the same catalog and seed always give the same manifest, tied to the catalog by hash
assert make_manifest(cat, 0.4, 3).to_json() == m.to_json()
print("catalog hash", m.catalog_hash[:12], "| label ids", np.array(sorted(m.seen | m.unseen)))
