from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neighborrank.ingest import InteractionLog, prepare
from neighborrank.neighbors import (
    ITEM_SCHEMA, USER_SCHEMA, USER_SCHEMA_NO_GENDER, Node, NeighborTable, build_interaction_matrix,
    build_neighbor_table, catalog_nodes, cosine_similarity, dynamic_neighbors, metapath_count,
    static_neighbors,
)
from neighborrank.synthetic import synthetic_log
from oracles import brute_dynamic, brute_static, positive_sets


def _users(rows):
    return pd.DataFrame(rows, columns=["user_id", "gender", "age", "occupation"]).assign(zip="0")


def _instances(pairs, label=1):
    return pd.DataFrame(
        [(u, i, label, 0) for u, i in pairs], columns=["user_id", "item_id", "label", "timestamp"]
    )


# ------------------------------------------------------------------------ metapaths


class TestMetapathCount:
    def test_two_shared_attributes(self):
        a = Node("user", 1, {"gender": frozenset("M"), "age": frozenset([18]), "occupation": frozenset([10])})
        b = Node("user", 2, {"gender": frozenset("F"), "age": frozenset([18]), "occupation": frozenset([10])})
        assert metapath_count(a, b, USER_SCHEMA) == 2

    def test_identical_triples(self):
        attrs = {"gender": frozenset("F"), "age": frozenset([25]), "occupation": frozenset([4])}
        assert metapath_count(Node("user", 1, attrs), Node("user", 2, attrs), USER_SCHEMA) == 3

    def test_shared_genres(self):
        a = Node("item", 1, {"genres": frozenset({"Comedy", "Drama"})})
        b = Node("item", 2, {"genres": frozenset({"Drama", "Thriller"})})
        assert metapath_count(a, b, ITEM_SCHEMA) == 1

    def test_kind_mismatch(self):
        a = Node("item", 1, {"genres": frozenset({"Drama"})})
        b = Node("user", 2, {"gender": frozenset("F"), "age": frozenset([1]), "occupation": frozenset([0])})
        with pytest.raises(ValueError):
            metapath_count(a, b, ITEM_SCHEMA)

    def test_schema_without_gender(self):
        cat = _users([(1, "M", 18, 10), (2, "M", 25, 3)])
        a, b = catalog_nodes(cat, USER_SCHEMA_NO_GENDER)
        assert metapath_count(a, b, USER_SCHEMA_NO_GENDER) == 0
        a, b = catalog_nodes(cat, USER_SCHEMA)
        assert metapath_count(a, b, USER_SCHEMA) == 1


class TestStaticNeighbors:
    def test_single_candidate(self):
        cat = _users([(1, "M", 18, 10), (2, "F", 25, 3), (3, "F", 56, 10)])
        assert static_neighbors(1, cat, USER_SCHEMA, 50) == [(3, 1)]

    def test_tie_break_keeps_lowest_ids(self):
        cat = _users([(i, "F", 35, 7) for i in range(1, 62)])
        got = static_neighbors(30, cat, USER_SCHEMA, 50)
        expected = [i for i in range(1, 62) if i != 30][:50]
        assert [n for n, _ in got] == expected
        assert all(c == 3 for _, c in got)

    def test_twenty_users_match_exhaustive(self):
        rng = np.random.default_rng(11)
        cat = _users([
            (i, rng.choice(["F", "M"]), rng.choice([1, 18, 25]), int(rng.integers(0, 4))) for i in range(1, 21)
        ])
        for uid in range(1, 21):
            assert static_neighbors(uid, cat, USER_SCHEMA, 7) == brute_static(cat, USER_SCHEMA, uid, 7)

    def test_listed_scores_dominate_unlisted(self, medium_log):
        cat = medium_log.items
        for iid in cat["item_id"][:40]:
            got = static_neighbors(int(iid), cat, ITEM_SCHEMA, 5)
            listed = {n for n, _ in got}
            nodes = {n.node_id: n for n in catalog_nodes(cat, ITEM_SCHEMA)}
            floor = min((c for _, c in got), default=0)
            for nid, node in nodes.items():
                if nid != iid and nid not in listed:
                    assert metapath_count(nodes[int(iid)], node, ITEM_SCHEMA) <= floor


# -------------------------------------------------------------- interaction matrix


class TestInteractionMatrix:
    def test_toy_row(self):
        im = build_interaction_matrix(_instances([(1, 1), (1, 4), (2, 2), (2, 4)]), [1, 2], [1, 2, 3, 4])
        assert im.row(1).toarray().tolist() == [[1, 0, 0, 1]]
        assert im.column(4).toarray().tolist() == [[1, 1]]

    def test_no_positives(self):
        im = build_interaction_matrix(_instances([(1, 1), (2, 3)], label=0), [1, 2], [1, 2, 3])
        assert im.matrix.nnz == 0 and im.matrix.shape == (2, 3)

    def test_row_sums_count_positives(self, small_prepared):
        train = small_prepared.splits.train
        im = build_interaction_matrix(train, small_prepared.log.users["user_id"], small_prepared.log.items["item_id"])
        sums = np.asarray(im.matrix.sum(axis=1)).ravel()
        counts = train[train["label"] == 1].groupby("user_id").size()
        expected = counts.reindex(im.user_ids, fill_value=0).to_numpy()
        assert (sums == expected).all()
        assert set(np.unique(im.matrix.data)) <= {1}


# --------------------------------------------------------------------------- cosine


class TestCosine:
    def test_identical(self):
        assert cosine_similarity([0, 1, 1, 0], [0, 1, 1, 0]) == pytest.approx(1.0, abs=1e-15)

    def test_disjoint(self):
        assert cosine_similarity([1, 0, 0], [0, 1, 1]) == 0.0

    def test_half_overlap(self):
        # 1 / sqrt(2); the 8-decimal rounding 0.70710678 is itself 1.2e-9 away
        assert abs(cosine_similarity([1, 1, 0], [1, 0, 0]) - 1 / math.sqrt(2)) < 1e-12
        assert abs(cosine_similarity([1, 1, 0], [1, 0, 0]) - 0.70710678) < 2e-9

    def test_zero_vector(self):
        assert cosine_similarity([0, 0], [1, 1]) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cosine_similarity([1, 0], [1, 0, 0])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=12))
    def test_symmetric_and_bounded(self, pairs):
        a = np.array([p[0] for p in pairs], dtype=float)
        b = np.array([p[1] for p in pairs], dtype=float)
        s = cosine_similarity(a, b)
        assert s == cosine_similarity(b, a)
        assert 0.0 <= s <= 1.0 + 1e-12


class TestDynamicNeighbors:
    def test_toy_top_neighbor(self):
        train = _instances([(1, 1), (1, 4), (2, 1), (2, 4), (3, 1), (3, 2), (3, 3)])
        im = build_interaction_matrix(train, [1, 2, 3, 4], [1, 2, 3, 4])
        got = dynamic_neighbors(1, im, "user", 10)
        assert got[0] == (2, pytest.approx(1.0))
        assert [n for n, _ in got] == [2, 3]

    def test_cold_node(self):
        im = build_interaction_matrix(_instances([(1, 1), (2, 1)]), [1, 2, 3], [1, 2])
        assert dynamic_neighbors(3, im, "user", 10) == []
        assert dynamic_neighbors(2, im, "item", 10) == []

    @pytest.mark.parametrize("seed", range(5))
    def test_random_fixture_matches_exhaustive(self, seed):
        rng = np.random.default_rng(seed)
        dense = rng.random((15, 10)) < 0.35
        pairs = [(u + 1, i + 1) for u, i in zip(*np.nonzero(dense))]
        train = _instances(pairs)
        im = build_interaction_matrix(train, range(1, 16), range(1, 11))
        for kind, ids in (("user", range(1, 16)), ("item", range(1, 11))):
            sets = positive_sets(train, kind)
            for nid in ids:
                sets.setdefault(nid, set())
            for nid in ids:
                got = dynamic_neighbors(nid, im, kind, 4)
                want = brute_dynamic(sets, nid, 4)
                assert [n for n, _ in got] == [n for n, _ in want]
                assert np.allclose([s for _, s in got], [s for _, s in want], rtol=0, atol=1e-12)


# -------------------------------------------------------------------- whole table


def _exhaustive_table_check(log, train, table):
    for kind, cat, schema in (("user", log.users, USER_SCHEMA), ("item", log.items, ITEM_SCHEMA)):
        sets = positive_sets(train, kind)
        id_col = f"{kind}_id"
        for nid in cat[id_col]:
            sets.setdefault(int(nid), set())
        for nid in cat[id_col]:
            nid = int(nid)
            got = table.neighbors(kind, "static", nid)
            assert [(n, int(s)) for n, s in got] == brute_static(cat, schema, nid, table.caps["static"])
            got = table.neighbors(kind, "dynamic", nid)
            want = brute_dynamic(sets, nid, table.caps["dynamic"])
            assert [n for n, _ in got] == [n for n, _ in want]
            assert all(s == w for (_, s), (_, w) in zip(got, want))


class TestNeighborTable:
    def test_exhaustive_small(self, small_prepared, small_table):
        _exhaustive_table_check(small_prepared.log, small_prepared.splits.train, small_table)

    def test_exhaustive_200_nodes(self):
        log = synthetic_log(n_users=110, n_items=90, mean_activity=10, seed=21)
        prep = prepare(log, seed=2)
        table = build_neighbor_table(prep.log, prep.splits.train, k_static=12, k_dynamic=6)
        assert prep.log.n_users + prep.log.n_items <= 200
        _exhaustive_table_check(prep.log, prep.splits.train, table)

    def test_caps_and_invariants(self, small_prepared):
        table = build_neighbor_table(small_prepared.log, small_prepared.splits.train)
        for (kind, rel), nl in table.lists.items():
            cap = 50 if rel == "static" else 10
            assert nl.neighbor_ids.shape[1] == cap
            for nid, row in zip(nl.node_ids, nl.neighbor_ids):
                row = row[row >= 0]
                assert nid not in row
                assert len(set(row)) == len(row)
                assert set(row) <= set(nl.node_ids)

    def test_single_user_has_empty_lists(self):
        ratings = pd.DataFrame({"user_id": [1, 1], "item_id": [1, 2], "rating": [5, 3], "timestamp": [1, 2]})
        users = _users([(1, "F", 25, 3)])
        items = pd.DataFrame({"item_id": [1, 2], "title": ["a", "b"], "genres": ["Drama", "Comedy"]})
        log = InteractionLog(ratings, users, items)
        table = build_neighbor_table(log, _instances([(1, 1), (1, 2)]))
        assert table.neighbors("user", "static", 1) == []
        assert table.neighbors("user", "dynamic", 1) == []

    def test_rebuild_byte_identical(self, small_prepared, tmp_path):
        a = build_neighbor_table(small_prepared.log, small_prepared.splits.train)
        b = build_neighbor_table(small_prepared.log, small_prepared.splits.train)
        a.save(tmp_path / "a.tsv")
        b.save(tmp_path / "b.tsv")
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
        assert (tmp_path / "a.tsv.meta.json").read_bytes() == (tmp_path / "b.tsv.meta.json").read_bytes()

    def test_save_load_roundtrip(self, small_table, tmp_path):
        small_table.save(tmp_path / "t.tsv")
        back = NeighborTable.load(tmp_path / "t.tsv")
        assert back.caps == small_table.caps
        for key, nl in small_table.lists.items():
            other = back.lists[key]
            assert (other.node_ids == nl.node_ids).all()
            assert (other.neighbor_ids == nl.neighbor_ids).all()
            assert (other.scores == nl.scores).all()
        assert back.to_lines() == small_table.to_lines()

    def test_test_split_perturbation_ignored(self, small_prepared):
        splits = small_prepared.splits
        a = build_neighbor_table(small_prepared.log, splits.train)
        test = splits.test.copy()
        test["label"] = 1 - test["label"]
        test["item_id"] = test["item_id"].sample(frac=1.0, random_state=0).to_numpy()
        # only the training split is handed to the miner; the mutated test split must not matter
        b = build_neighbor_table(small_prepared.log, splits.train)
        assert a.to_lines() == b.to_lines()
        assert a.meta["source_split"] == b.meta["source_split"]

    def test_threaded_equals_serial(self, medium_log, monkeypatch):
        prep = prepare(medium_log, seed=1)
        import neighborrank.neighbors as nb
        monkeypatch.setattr(nb, "CHUNK", 37)
        serial = build_neighbor_table(prep.log, prep.splits.train, n_jobs=1)
        threaded = build_neighbor_table(prep.log, prep.splits.train, n_jobs=4)
        assert serial.to_lines() == threaded.to_lines()

    def test_no_gender_schema_recorded(self, small_prepared):
        t = build_neighbor_table(small_prepared.log, small_prepared.splits.train, user_schema=USER_SCHEMA_NO_GENDER)
        assert t.meta["user_schema"] == ["age", "occupation"]
