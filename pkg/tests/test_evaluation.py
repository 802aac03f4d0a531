from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neighborrank.errors import UndefinedMetricError
from neighborrank.evaluation import (
    EvalReport, auc, evaluate, markdown_table, read_reports, run_ablation, summarize, write_reports,
)
from neighborrank.model import load_checkpoint, save_checkpoint
from neighborrank.trainer import TrainConfig, train
from oracles import pairwise_auc

TINY = dict(emb_dim=4, hidden=(8, 4), type_att_dim=4, h_max=5, k_static=4, k_dynamic=3)


labelled = st.lists(
    st.tuples(st.floats(-5, 5, allow_nan=False), st.integers(0, 1)), min_size=2, max_size=60
).filter(lambda xs: len({y for _, y in xs}) == 2)


class TestAuc:
    def test_perfect(self):
        assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_all_tied(self):
        assert auc([0.5] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_reversed(self):
        assert auc([0.1, 0.2, 0.9], [1, 1, 0]) == 0.0

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_pairwise_oracle_500(self, seed):
        rng = np.random.default_rng(seed)
        labels = (rng.random(500) < 0.25).astype(int)
        # coarse rounding plants many ties
        scores = np.round(rng.random(500) + 0.3 * labels, 2)
        assert abs(auc(scores, labels) - pairwise_auc(scores, labels)) <= 1e-12

    def test_single_class_raises(self):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2], [1, 1])
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2], [0, 0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [1])

    @settings(max_examples=150, deadline=None)
    @given(labelled)
    def test_monotone_transform_invariant(self, xs):
        # integer scores keep the cubic transform exact, hence strictly increasing
        s = np.round(np.array([x for x, _ in xs]) * 10)
        y = np.array([v for _, v in xs])
        assert auc(s, y) == pytest.approx(auc(s ** 3 + 7 * s - 2, y), abs=1e-12)

    @settings(max_examples=150, deadline=None)
    @given(labelled)
    def test_negation_complements(self, xs):
        s = np.array([x for x, _ in xs])
        y = np.array([v for _, v in xs])
        assert auc(s, y) + auc(-s, y) == pytest.approx(1.0, abs=1e-12)
        assert 0.0 <= auc(s, y) <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(labelled)
    def test_oracle_property(self, xs):
        s = [x for x, _ in xs]
        y = [v for _, v in xs]
        assert auc(s, y) == pytest.approx(pairwise_auc(s, y), abs=1e-12)


@pytest.fixture(scope="module")
def trained(small_prepared, small_table):
    cfg = TrainConfig(max_epochs=2, seed=0, **TINY)
    return cfg, train(small_prepared.log, small_prepared.splits, small_table, cfg)


class TestEvaluate:
    def test_repeatable(self, small_prepared, trained):
        _, res = trained
        a = evaluate(res.model, res.params, small_prepared.splits.test, res.history, dataset_variant="syn")
        b = evaluate(res.model, res.params, small_prepared.splits.test, res.history, dataset_variant="syn")
        assert a == b
        assert a.model_variant == "both" and a.n_test == len(small_prepared.splits.test)

    def test_checkpoint_reproduces_auc(self, small_prepared, trained, tmp_path):
        cfg, res = trained
        rep = evaluate(res.model, res.params, small_prepared.splits.test, res.history)
        save_checkpoint(tmp_path / "m.npz", res.params, {"config": cfg.to_dict()})
        params, meta = load_checkpoint(tmp_path / "m.npz", res.model.param_shapes())
        again = evaluate(res.model, params, small_prepared.splits.test, res.history)
        assert again.auc == rep.auc and again.param_fingerprint == rep.param_fingerprint
        assert meta["config"] == cfg.to_dict()

    def test_report_file_roundtrip(self, small_prepared, trained, tmp_path):
        _, res = trained
        rep = evaluate(res.model, res.params, small_prepared.splits.test, res.history,
                       dataset_variant="syn", seed=0, config_fingerprint="00ab")
        write_reports([rep], tmp_path / "r.tsv")
        assert read_reports(tmp_path / "r.tsv") == [rep]
        assert (tmp_path / "r.tsv.summary.json").is_file()

    def test_report_rejects_bad_auc(self):
        with pytest.raises(ValueError):
            EvalReport("d", "both", 0, 1.5, 1, 1, 1, 1)


def _fake(ds, variant, seed, value):
    return EvalReport(ds, variant, seed, value, 10, 3, 30, 5)


class TestSummaries:
    def test_gain_relative_to_baseline_mean(self):
        reps = [_fake("s", "baseline", 0, 0.80), _fake("s", "baseline", 1, 0.82),
                _fake("s", "both", 0, 0.85), _fake("s", "both", 1, 0.87)]
        g = summarize(reps)
        assert g.loc[("s", "both"), "gain"] == pytest.approx(0.05)
        assert g.loc[("s", "baseline"), "n"] == 2

    def test_markdown_shape(self):
        reps = [_fake("sparse", v, s, 0.8 + 0.01 * k) for k, v in
                enumerate(["baseline", "item_only", "user_only", "both"]) for s in range(3)]
        md = markdown_table(reps)
        rows = [line for line in md.splitlines() if line.startswith("| ") and "---" not in line]
        assert len(rows) == 5  # header plus four variants
        assert rows[1].startswith("| baseline (no neighbors) | 0.8000 |")
        assert "(+0.0300)" in rows[2]


class TestAblation:
    def test_reports_per_variant_and_seed(self, small_prepared, small_table):
        seen = []
        cfg = TrainConfig(max_epochs=1, **TINY)
        reps = run_ablation(small_prepared, small_table, seeds=[0, 1], config=cfg, dataset_variant="syn",
                            dataset_fingerprint="feed", on_report=seen.append)
        assert len(reps) == 8 and seen == reps
        assert {(r.model_variant, r.seed) for r in reps} == {
            (v, s) for v in ("baseline", "item_only", "user_only", "both") for s in (0, 1)
        }
        assert {r.dataset_fingerprint for r in reps} == {"feed"}
        assert len({r.n_test for r in reps}) == 1

    def test_needs_seed(self, small_prepared, small_table):
        with pytest.raises(ValueError):
            run_ablation(small_prepared, small_table, seeds=[], config=TrainConfig(**TINY))
