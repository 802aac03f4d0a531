from __future__ import annotations

import numpy as np
import pytest

from neighborrank.ingest import HistoryIndex, prepare
from neighborrank.model import FeatureSpace, ModelConfig, RankModel
from neighborrank.neighbors import build_neighbor_table
from neighborrank.synthetic import synthetic_log
from neighborrank.trainer import EncodedSplit

SMALL = ModelConfig(emb_dim=4, hidden=(5, 4, 3), type_att_dim=3, init_scale=0.5)


@pytest.fixture(scope="session")
def small_log():
    return synthetic_log(n_users=40, n_items=30, mean_activity=6, seed=3)


@pytest.fixture(scope="session")
def small_prepared(small_log):
    return prepare(small_log, neg_ratio=3, seed=0)


@pytest.fixture(scope="session")
def small_table(small_prepared):
    return build_neighbor_table(small_prepared.log, small_prepared.splits.train, k_static=4, k_dynamic=3)


@pytest.fixture(scope="session")
def medium_log():
    return synthetic_log(n_users=300, n_items=200, mean_activity=12, seed=7)


def make_small_model(prepared, table, mode="both", config=SMALL, h_max=5):
    features = FeatureSpace.from_log(prepared.log)
    history = HistoryIndex(prepared.splits.train, features.user_ids, h_max)
    model = RankModel(features, config, mode, table)
    return model, history


def small_batch(prepared, history, model, n=12, seed=0):
    df = prepared.splits.train
    rng = np.random.default_rng(seed)
    pos = df.index[df["label"] == 1].to_numpy()
    neg = df.index[df["label"] == 0].to_numpy()
    rows = np.concatenate([rng.choice(pos, n // 2, replace=False), rng.choice(neg, n - n // 2, replace=False)])
    return EncodedSplit(df.loc[rows].reset_index(drop=True), model.features, history).batch(slice(None))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
