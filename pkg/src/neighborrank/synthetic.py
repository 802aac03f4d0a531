"""Synthetic MovieLens-shaped logs with planted attribute/taste structure.

Used by the tests and the demo script. User taste is a sum of per-attribute
vectors (gender, age, occupation) plus noise, and item appeal is the mean of
its genre vectors plus noise, so both attribute neighbors and co-click
neighbors carry real signal. Activity is heavy-tailed to give long-tail users.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

from neighborrank.ingest import AGE_BUCKETS, GENDERS, GENRES, N_OCCUPATIONS, InteractionLog


def synthetic_log(
    n_users: int = 300,
    n_items: int = 200,
    mean_activity: float = 20.0,
    dim: int = 8,
    noise: float = 0.5,
    seed: int = 0,
) -> InteractionLog:
    rng = np.random.default_rng(seed)
    gender = rng.integers(0, len(GENDERS), n_users)
    age = rng.integers(0, len(AGE_BUCKETS), n_users)
    occ = rng.integers(0, N_OCCUPATIONS, n_users)
    gv = rng.normal(size=(len(GENDERS), dim))
    av = rng.normal(size=(len(AGE_BUCKETS), dim))
    ov = rng.normal(size=(N_OCCUPATIONS, dim))
    taste = gv[gender] + av[age] + ov[occ] + noise * rng.normal(size=(n_users, dim))

    genre_vec = rng.normal(size=(len(GENRES), dim))
    n_genres = rng.integers(1, 4, n_items)
    genre_sets = [np.sort(rng.choice(len(GENRES), k, replace=False)) for k in n_genres]
    appeal = np.stack([genre_vec[g].mean(axis=0) for g in genre_sets])
    appeal += noise * rng.normal(size=(n_items, dim))
    popularity = rng.normal(scale=0.5, size=n_items)

    activity = np.clip(
        np.round(rng.lognormal(np.log(mean_activity), 1.0, n_users)), 1, n_items // 2
    ).astype(int)

    user_ids = np.arange(1, n_users + 1)
    item_ids = np.arange(1, n_items + 1)
    logits = taste @ appeal.T / np.sqrt(dim) + popularity
    rows = []
    for u in range(n_users):
        # Gumbel top-k: sample without replacement proportional to exp(logit)
        keys = logits[u] + rng.gumbel(size=n_items)
        chosen = np.argsort(-keys)[: activity[u]]
        ts = np.sort(rng.integers(9.5e8, 1.05e9, len(chosen)))
        ratings = rng.integers(1, 6, len(chosen))
        for i, t, r in zip(chosen, ts, ratings):
            rows.append((user_ids[u], item_ids[i], r, t))

    ratings = pd.DataFrame(rows, columns=["user_id", "item_id", "rating", "timestamp"]).astype(np.int64)
    users = pd.DataFrame({
        "user_id": user_ids,
        "gender": [GENDERS[g] for g in gender],
        "age": [AGE_BUCKETS[a] for a in age],
        "occupation": occ.astype(np.int64),
        "zip": [f"{10000 + u:05d}" for u in range(n_users)],
    })
    items = pd.DataFrame({
        "item_id": item_ids,
        "title": [f"Movie {i} (1999)" for i in item_ids],
        "genres": ["|".join(GENRES[k] for k in g) for g in genre_sets],
    })
    return InteractionLog(ratings, users, items)
