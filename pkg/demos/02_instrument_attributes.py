"""Genre vectors from instrument likelihoods.

Each track has crowd-style likelihoods for a few instruments. Above 0.5 counts
as "present", below as "absent", exactly 0.5 as unannotated. Present/absent
indicators are summed over a genre's tracks and the columns standardized,
giving one semantic vector per genre.
"""

import numpy as np

from zsltag.catalog import Catalog
from zsltag.sideinfo import (
    LikelihoodAnnotations,
    accumulate_attributes,
    build_attribute_table,
    instance_attribute_vector,
)

vocab = ("guitar", "piano", "sax", "drums")
cat = Catalog.from_records([
    ("t1", ["rock"], None),
    ("t2", ["rock", "blues"], None),
    ("t3", ["jazz"], None),
    ("t4", ["jazz", "blues"], None),
    ("t5", ["blues"], None),
    ("t6", ["rock"], None),
])
rows = (
    ("t1", "guitar", 0.9), ("t1", "drums", 0.8), ("t1", "piano", 0.1),
    ("t2", "guitar", 0.7), ("t2", "sax", 0.5), ("t2", "drums", 0.2),
    ("t3", "piano", 0.95), ("t3", "sax", 0.6), ("t3", "drums", 0.5),
    ("t4", "sax", 0.9), ("t4", "guitar", 0.3),
    ("t5", "guitar", 0.6), ("t5", "piano", 0.4), ("t5", "sax", 0.5),
    ("t6", "drums", 0.99), ("t6", "guitar", 0.5),
)
lik = LikelihoodAnnotations(vocab, rows)

slots = [f"{a}{s}" for a in vocab for s in "+-"]
print("slots:", " ".join(slots))
print("t2 ->", instance_attribute_vector({"guitar": 0.7, "sax": 0.5, "drums": 0.2}, vocab))

np.set_printoptions(precision=3, suppress=True)
print("\naccumulated counts")
for name, row in zip(cat.label_names, accumulate_attributes(lik, cat)):
    print(f"  {name:<6}", row)

table = build_attribute_table(lik, cat)
print("\nstandardized table (sax- never fires, so its column stays 0)")
for name, row in zip(table.names, table.vectors):
    print(f"  {name:<6}", row)
print("column means", table.vectors.mean(axis=0))
