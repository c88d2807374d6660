import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsltag.catalog import Catalog
from zsltag.errors import ConfigError, DataError
from zsltag.split import (
    SetupView,
    SplitManifest,
    coverage_report,
    holdout_validation,
    make_manifest,
    make_setup,
    parse_setup,
    partition_instances,
    split_labels,
)

from conftest import random_catalog


def brute_force_group(positives, seen, unseen):
    in_x = any(l in seen for l in positives)
    in_y = any(l in unseen for l in positives)
    if in_x and not in_y:
        return "A"
    if in_x and in_y:
        return "B"
    if in_y and not in_x:
        return "C"
    raise AssertionError("instance without positives")


def check_manifest(cat, m):
    labels = set(cat.label_ids)
    assert m.seen | m.unseen == labels and not m.seen & m.unseen
    assert m.group_a | m.group_b | m.group_c == set(cat.instance_ids)
    assert not (m.group_a & m.group_b or m.group_a & m.group_c or m.group_b & m.group_c)
    for iid in cat.instance_ids:
        pos = cat.positives(iid)
        group = "A" if iid in m.group_a else "B" if iid in m.group_b else "C"
        assert group == brute_force_group(pos, m.seen, m.unseen)
        n_x, n_y = len(pos & m.seen), len(pos & m.unseen)
        assert {"A": n_x >= 1 and n_y == 0, "B": n_x >= 1 and n_y >= 1, "C": n_x == 0 and n_y >= 1}[group]


def labels_catalog(n):
    return Catalog.from_records([(f"i{k}", [f"l{k:04d}"], None) for k in range(n)])


class TestSplitLabels:
    def test_fma_sizes(self):
        seen, unseen = split_labels(labels_catalog(157), 32 / 157, seed=0)
        assert (len(seen), len(unseen)) == (125, 32)

    def test_msd_sizes(self):
        seen, unseen = split_labels(labels_catalog(1126), 226 / 1126, seed=3)
        assert (len(seen), len(unseen)) == (900, 226)

    def test_deterministic(self, rng):
        cat = random_catalog(rng, 50, 20)
        assert split_labels(cat, 0.3, 7) == split_labels(cat, 0.3, 7)
        assert split_labels(cat, 0.3, 7) != split_labels(cat, 0.3, 8)

    @pytest.mark.parametrize("frac", [0.0, 1.0, -0.1, 1.5])
    def test_fraction_range(self, toy_catalog, frac):
        with pytest.raises(ConfigError):
            split_labels(toy_catalog, frac, 0)

    def test_both_sides_nonempty(self, toy_catalog):
        seen, unseen = split_labels(toy_catalog, 0.01, 0)
        assert len(unseen) == 1 and len(seen) == 3
        seen, unseen = split_labels(toy_catalog, 0.99, 0)
        assert len(unseen) == 3 and len(seen) == 1


class TestPartition:
    def test_forced_example(self, toy_catalog):
        c = toy_catalog
        m = partition_instances(c, {c.label_id("g1"), c.label_id("g2")}, {c.label_id("g3"), c.label_id("g4")})
        assert m.group_a == {"i1", "i4"}
        assert m.group_b == {"i2"}
        assert m.group_c == {"i3"}

    def test_no_unseen_positives(self):
        c = Catalog.from_records([("i1", ["a"], None), ("i2", ["a", "b"], None), ("i3", ["z"], None)])
        m = partition_instances(c, {c.label_id("a"), c.label_id("b")}, {c.label_id("z")})
        assert m.group_b == set() and m.group_c == {"i3"}

    def test_must_partition(self, toy_catalog):
        with pytest.raises(DataError):
            partition_instances(toy_catalog, {0, 1}, {1, 2, 3})

    def test_randomized_brute_force(self, rng):
        cat = random_catalog(rng, 200, 15)
        check_manifest(cat, make_manifest(cat, 0.25, seed=11))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6), n=st.integers(5, 80), labels=st.integers(2, 20), frac=st.floats(0.05, 0.95))
    def test_invariants_property(self, seed, n, labels, frac):
        cat = random_catalog(np.random.default_rng(seed), n, labels)
        check_manifest(cat, make_manifest(cat, frac, seed))

    def test_manifest_json_round_trip(self, rng, tmp_path):
        cat = random_catalog(rng, 50, 10)
        m = make_manifest(cat, 0.3, 5)
        m.save(tmp_path / "m.json")
        assert SplitManifest.load(tmp_path / "m.json") == m
        assert m.catalog_hash == cat.content_hash()

    def test_byte_identical(self, rng):
        cat = random_catalog(rng, 80, 12)
        assert make_manifest(cat, 0.2, 9).to_json() == make_manifest(cat, 0.2, 9).to_json()


class TestSetups:
    @pytest.fixture
    def manifest(self, toy_catalog):
        c = toy_catalog
        return partition_instances(c, {c.label_id("g1"), c.label_id("g2")}, {c.label_id("g3"), c.label_id("g4")})

    def test_ax(self, toy_catalog, manifest):
        v = make_setup(manifest, toy_catalog, "A", "X")
        assert set(v.instance_ids) == {"i1", "i4"}
        assert {toy_catalog.label_name(l) for l in v.label_ids} == {"g1", "g2"}
        assert v.allows("train") and not v.allows("annotation")

    def test_bc_y(self, toy_catalog, manifest):
        v = make_setup(manifest, toy_catalog, "B+C", "Y", purpose="retrieval")
        assert set(v.instance_ids) == {"i2", "i3"}
        assert {toy_catalog.label_name(l) for l in v.label_ids} == {"g3", "g4"}
        assert v.name == "(B+C)-Y"

    def test_cy_retrieval_rejected(self, toy_catalog, manifest):
        with pytest.raises(ConfigError, match="C-Y"):
            make_setup(manifest, toy_catalog, "C", "Y", purpose="retrieval")
        v = make_setup(manifest, toy_catalog, "C", "Y", purpose="annotation")
        assert v.allows("annotation") and not v.allows("retrieval")

    def test_unlisted(self, toy_catalog, manifest):
        with pytest.raises(ConfigError):
            make_setup(manifest, toy_catalog, "A", "Y")
        with pytest.raises(ConfigError):
            make_setup(manifest, toy_catalog, "C", "X", purpose="train")

    def test_parse(self):
        assert parse_setup("(A+B)-X") == ("A+B", "X")
        assert parse_setup("(C+B)-(Y+X)") == ("B+C", "X+Y")
        with pytest.raises(ConfigError):
            parse_setup("D-X")

    def test_matrix_is_masked_catalog(self, rng):
        cat = random_catalog(rng, 120, 10)
        m = make_manifest(cat, 0.3, 2)
        dense = cat.matrix.toarray()
        for inst, lab in [("A+B", "X"), ("B+C", "X+Y"), ("A+B+C", "Y")]:
            v = make_setup(m, cat, inst, lab)
            rows = [cat.instance_index(i) for i in v.instance_ids]
            cols = [cat.label_index(l) for l in v.label_ids]
            np.testing.assert_array_equal(v.matrix, dense[np.ix_(rows, cols)])
            assert set(v.instance_ids) == m.instances(inst)
            assert set(v.label_ids) == m.labels(lab)

    def test_union_of_train_setups(self, rng):
        cat = random_catalog(rng, 120, 10)
        m = make_manifest(cat, 0.3, 2)
        ab = make_setup(m, cat, "A+B", "X")
        a = make_setup(m, cat, "A", "X")
        b = make_setup(m, cat, "B", "X")
        assert set(ab.instance_ids) == set(a.instance_ids) | set(b.instance_ids)

    def test_label_first_train_has_no_unseen_positive(self, rng):
        cat = random_catalog(rng, 150, 12)
        m = make_manifest(cat, 0.3, 4)
        a_ids = make_setup(m, cat, "A", "X").instance_ids
        assert cat.submatrix(a_ids, sorted(m.unseen)).sum() == 0

    def test_generalized_contains_restricted(self, rng):
        cat = random_catalog(rng, 100, 10)
        m = make_manifest(cat, 0.3, 1)
        y = make_setup(m, cat, "B+C", "Y")
        xy = make_setup(m, cat, "B+C", "X+Y")
        assert set(y.label_ids) < set(xy.label_ids)
        assert y.instance_ids == xy.instance_ids


class TestHoldout:
    def view(self, n, purposes=frozenset({"train"})):
        ids = tuple(f"i{k:05d}" for k in range(n))
        return SetupView("A", "X", ids, (0,), np.ones((n, 1), np.int8), purposes)

    def test_ninety_ten(self):
        tr, va = holdout_validation(self.view(100), 0.1, 0)
        assert (len(tr), len(va)) == (90, 10)
        assert not set(tr) & set(va)

    def test_fma_ax_count(self):
        # round(0.1 * 11606) = 1161 (half-up of 1160.6)
        tr, va = holdout_validation(self.view(11606), 0.1, 0)
        assert len(va) == 1161 and len(tr) == 11606 - 1161

    def test_too_small(self):
        with pytest.raises(DataError):
            holdout_validation(self.view(2), 0.999, 0)

    def test_deterministic(self):
        v = self.view(50)
        assert holdout_validation(v, 0.2, 3) == holdout_validation(v, 0.2, 3)

    def test_requires_train_setup(self):
        with pytest.raises(ConfigError):
            holdout_validation(self.view(10, frozenset({"annotation"})), 0.1, 0)


class TestCoverage:
    def test_flags_uncovered(self, toy_catalog):
        c = toy_catalog
        m = partition_instances(c, {c.label_id("g1"), c.label_id("g2")}, {c.label_id("g3"), c.label_id("g4")})
        v = make_setup(m, c, "B", "Y")
        rep = {c.label_name(r.label_id): r for r in coverage_report(v)}
        assert rep["g4"].excluded and rep["g4"].n_positives == 0
        assert not rep["g3"].excluded

    def test_all_covered(self, toy_catalog):
        c = toy_catalog
        m = partition_instances(c, {c.label_id("g1"), c.label_id("g2")}, {c.label_id("g3"), c.label_id("g4")})
        v = make_setup(m, c, "B+C", "Y")
        assert [r for r in coverage_report(v) if r.excluded] == []

    def test_brute_force_counts(self, rng):
        cat = random_catalog(rng, 150, 14)
        m = make_manifest(cat, 0.3, 6)
        v = make_setup(m, cat, "C", "X+Y")
        for r in coverage_report(v):
            expected = sum(1 for i in v.instance_ids if r.label_id in cat.positives(i))
            assert r.n_positives == expected
            assert r.excluded == (expected == 0)
