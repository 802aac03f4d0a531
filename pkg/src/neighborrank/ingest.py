"""MovieLens 1M parsing, long-tail variants, negative sampling and splits."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from neighborrank.errors import ConfigError, IntegrityError

GENDERS = ("F", "M")
AGE_BUCKETS = (1, 18, 25, 35, 45, 50, 56)
N_OCCUPATIONS = 21
GENRES = (
    "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical",
    "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)
ENCODING = "latin-1"

RATING_COLUMNS = ["user_id", "item_id", "rating", "timestamp"]
USER_COLUMNS = ["user_id", "gender", "age", "occupation", "zip"]
ITEM_COLUMNS = ["item_id", "title", "genres"]
INSTANCE_COLUMNS = ["user_id", "item_id", "label", "timestamp"]


@dataclass
class InteractionLog:
    """Rating records plus the user and item catalogs they reference.

    ``ratings`` columns: user_id, item_id, rating, timestamp.
    ``users`` columns: user_id, gender, age, occupation, zip.
    ``items`` columns: item_id, title, genres (``|``-joined genre names).
    Catalogs are sorted by id.
    """

    ratings: pd.DataFrame
    users: pd.DataFrame
    items: pd.DataFrame

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_interactions(self) -> int:
        return len(self.ratings)

    def stats_line(self) -> str:
        return f"{self.n_users} users / {self.n_items} items / {self.n_interactions} interactions"

    def validate(self) -> None:
        if self.users["user_id"].duplicated().any():
            raise IntegrityError("duplicate user_id in user catalog")
        if self.items["item_id"].duplicated().any():
            raise IntegrityError("duplicate item_id in item catalog")
        if self.ratings.duplicated(["user_id", "item_id"]).any():
            raise IntegrityError("duplicate (user_id, item_id) pair in ratings")
        if not self.ratings["user_id"].isin(self.users["user_id"]).all():
            raise IntegrityError("rating references unknown user_id")
        if not self.ratings["item_id"].isin(self.items["item_id"]).all():
            raise IntegrityError("rating references unknown item_id")


@dataclass(frozen=True)
class LabeledInstance:
    user_id: int
    item_id: int
    label: int
    history: tuple[int, ...] = ()


@dataclass
class DatasetSplits:
    """Train/validation/test instance tables (columns as ``INSTANCE_COLUMNS``)."""

    train: pd.DataFrame
    valid: pd.DataFrame
    test: pd.DataFrame
    split_seed: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.valid), len(self.test)


# --------------------------------------------------------------------------- parsing


def _split_fields(line: str, n: int, path: Path, lineno: int) -> list[str]:
    parts = line.split("::")
    if len(parts) != n:
        raise IntegrityError(f"{path}:{lineno}: expected {n} '::'-separated fields, got {len(parts)}")
    return parts


def _to_int(value: str, path: Path, lineno: int, what: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise IntegrityError(f"{path}:{lineno}: {what} is not an integer: {value!r}") from None


def _read_lines(path: Path) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, encoding=ENCODING, newline="") as fh:
        return [line.rstrip("\r\n") for line in fh]


def _parse_users(path: Path) -> pd.DataFrame:
    rows = []
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line:
            continue
        uid, gender, age, occ, zipcode = _split_fields(line, 5, path, lineno)
        uid_i = _to_int(uid, path, lineno, "UserID")
        age_i = _to_int(age, path, lineno, "Age")
        occ_i = _to_int(occ, path, lineno, "Occupation")
        if gender not in GENDERS:
            raise IntegrityError(f"{path}:{lineno}: unknown gender {gender!r}")
        if age_i not in AGE_BUCKETS:
            raise IntegrityError(f"{path}:{lineno}: unknown age bucket {age_i}")
        if not 0 <= occ_i < N_OCCUPATIONS:
            raise IntegrityError(f"{path}:{lineno}: occupation {occ_i} outside 0-20")
        rows.append((uid_i, gender, age_i, occ_i, zipcode))
    users = pd.DataFrame(rows, columns=USER_COLUMNS)
    if users["user_id"].duplicated().any():
        dup = int(users.loc[users["user_id"].duplicated(), "user_id"].iloc[0])
        raise IntegrityError(f"{path}: duplicate UserID {dup}")
    return users.astype({"user_id": np.int64, "age": np.int64, "occupation": np.int64})


def _parse_movies(path: Path) -> pd.DataFrame:
    known = set(GENRES)
    rows = []
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line:
            continue
        head, sep, genres = line.rpartition("::")
        mid, sep2, title = head.partition("::")
        if not sep or not sep2:
            raise IntegrityError(f"{path}:{lineno}: expected 3 '::'-separated fields")
        mid_i = _to_int(mid, path, lineno, "MovieID")
        names = genres.split("|")
        if not genres or any(g not in known for g in names):
            raise IntegrityError(f"{path}:{lineno}: bad genre list {genres!r}")
        rows.append((mid_i, title, genres))
    items = pd.DataFrame(rows, columns=ITEM_COLUMNS)
    if items["item_id"].duplicated().any():
        dup = int(items.loc[items["item_id"].duplicated(), "item_id"].iloc[0])
        raise IntegrityError(f"{path}: duplicate MovieID {dup}")
    return items.astype({"item_id": np.int64})


def _parse_ratings(path: Path, user_ids: set[int], item_ids: set[int]) -> pd.DataFrame:
    lines = _read_lines(path)
    n = len(lines)
    out = np.empty((n, 4), dtype=np.int64)
    seen: set[tuple[int, int]] = set()
    k = 0
    for lineno, line in enumerate(lines, 1):
        if not line:
            continue
        uid, mid, rating, ts = _split_fields(line, 4, path, lineno)
        u = _to_int(uid, path, lineno, "UserID")
        i = _to_int(mid, path, lineno, "MovieID")
        r = _to_int(rating, path, lineno, "Rating")
        t = _to_int(ts, path, lineno, "Timestamp")
        if u not in user_ids:
            raise IntegrityError(f"{path}:{lineno}: unknown UserID {u}")
        if i not in item_ids:
            raise IntegrityError(f"{path}:{lineno}: unknown MovieID {i}")
        if not 1 <= r <= 5:
            raise IntegrityError(f"{path}:{lineno}: rating {r} outside 1-5")
        if (u, i) in seen:
            raise IntegrityError(f"{path}:{lineno}: duplicate rating for user {u}, movie {i}")
        seen.add((u, i))
        out[k] = (u, i, r, t)
        k += 1
    return pd.DataFrame(out[:k], columns=RATING_COLUMNS)


def parse_movielens(ratings_path, users_path, movies_path) -> InteractionLog:
    """Read the three ``::``-delimited MovieLens 1M files.

    Raises ``FileNotFoundError`` for a missing file and ``IntegrityError``
    (with the offending line number) for malformed lines or unknown ids.
    """
    users = _parse_users(Path(users_path)).sort_values("user_id", ignore_index=True)
    items = _parse_movies(Path(movies_path)).sort_values("item_id", ignore_index=True)
    ratings = _parse_ratings(
        Path(ratings_path), set(users["user_id"].tolist()), set(items["item_id"].tolist())
    )
    return InteractionLog(ratings, users, items)


def load_movielens_dir(directory) -> InteractionLog:
    d = Path(directory)
    return parse_movielens(d / "ratings.dat", d / "users.dat", d / "movies.dat")


def write_movielens(log: InteractionLog, directory) -> None:
    """Write ``log`` back out in the original ``::`` format."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "users.dat", "w", encoding=ENCODING, newline="\n") as fh:
        for row in log.users.itertuples(index=False):
            fh.write(f"{row.user_id}::{row.gender}::{row.age}::{row.occupation}::{row.zip}\n")
    with open(d / "movies.dat", "w", encoding=ENCODING, newline="\n") as fh:
        for row in log.items.itertuples(index=False):
            fh.write(f"{row.item_id}::{row.title}::{row.genres}\n")
    r = log.ratings
    lines = (
        r["user_id"].astype(str) + "::" + r["item_id"].astype(str) + "::"
        + r["rating"].astype(str) + "::" + r["timestamp"].astype(str)
    )
    with open(d / "ratings.dat", "w", encoding=ENCODING, newline="\n") as fh:
        if len(lines):
            fh.write("\n".join(lines) + "\n")


# ------------------------------------------------------------------ persistence (tsv)


def save_log(log: InteractionLog, directory, meta: dict | None = None) -> None:
    """Persist as tab-separated files with a header line plus ``meta.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    log.ratings.to_csv(d / "ratings.tsv", sep="\t", index=False, lineterminator="\n")
    log.users.to_csv(d / "users.tsv", sep="\t", index=False, lineterminator="\n")
    if log.items["title"].str.contains("\t").any():
        raise IntegrityError("item title contains a tab")
    log.items.to_csv(d / "items.tsv", sep="\t", index=False, lineterminator="\n", quoting=csv.QUOTE_NONE)
    meta = dict(meta or {})
    meta.setdefault("n_users", log.n_users)
    meta.setdefault("n_items", log.n_items)
    meta.setdefault("n_interactions", log.n_interactions)
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_log(directory) -> InteractionLog:
    d = Path(directory)
    for name in ("ratings.tsv", "users.tsv", "items.tsv"):
        if not (d / name).is_file():
            raise FileNotFoundError(f"no such file: {d / name}")
    ratings = pd.read_csv(d / "ratings.tsv", sep="\t", dtype=np.int64)
    users = pd.read_csv(
        d / "users.tsv", sep="\t",
        dtype={"user_id": np.int64, "gender": str, "age": np.int64, "occupation": np.int64, "zip": str},
        keep_default_na=False,
    )
    items = pd.read_csv(
        d / "items.tsv", sep="\t", dtype={"item_id": np.int64, "title": str, "genres": str},
        keep_default_na=False, quoting=3,
    )
    return InteractionLog(ratings, users, items)


def load_meta(directory) -> dict:
    path = Path(directory) / "meta.json"
    return json.loads(path.read_text()) if path.is_file() else {}


# ------------------------------------------------------------------------ variants


def _restrict_catalogs(ratings: pd.DataFrame, log: InteractionLog) -> InteractionLog:
    users = log.users[log.users["user_id"].isin(ratings["user_id"])].reset_index(drop=True)
    items = log.items[log.items["item_id"].isin(ratings["item_id"])].reset_index(drop=True)
    return InteractionLog(ratings.reset_index(drop=True), users, items)


def derive_longtail(log: InteractionLog, fraction: float, seed: int) -> InteractionLog:
    """Keep exactly ``round(N * fraction)`` interactions sampled without replacement.

    Users and items left without interactions are dropped from the catalogs.
    """
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}", "fraction")
    n = log.n_interactions
    n_keep = int(math.floor(n * fraction + 0.5))
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(n, size=n_keep, replace=False))
    return _restrict_catalogs(log.ratings.iloc[keep], log)


def derive_sparse(log: InteractionLog, max_interactions: int) -> InteractionLog:
    """Drop every user with more than ``max_interactions`` interactions."""
    if max_interactions < 1:
        raise ConfigError("max_interactions must be >= 1", "cap")
    counts = log.ratings.groupby("user_id")["item_id"].transform("size")
    return _restrict_catalogs(log.ratings[counts <= max_interactions], log)


# ---------------------------------------------------------------- negative sampling


def sample_negatives(log: InteractionLog, ratio: int, seed: int) -> pd.DataFrame:
    """One positive per interaction followed by ``ratio`` unseen-item negatives.

    Negatives are drawn uniformly from the log's item catalog minus everything
    the user has rated, without replacement within one positive's negative
    set. Users who have rated every item get no negatives (with a warning);
    users with fewer than ``ratio`` unseen items get all of them.
    Returns a frame with columns ``INSTANCE_COLUMNS``; negatives carry
    timestamp -1.
    """
    if ratio < 1:
        raise ConfigError("negative ratio must be >= 1", "ratio")
    rng = np.random.default_rng(seed)
    item_ids = log.items["item_id"].to_numpy()
    n_items = len(item_ids)
    r = log.ratings
    users = r["user_id"].to_numpy()
    item_idx = np.searchsorted(item_ids, r["item_id"].to_numpy())
    n_pos = len(r)

    # membership test on (user, item_index) pairs encoded as one int64
    viewed = np.sort(users * n_items + item_idx)

    def is_viewed(u, cand):
        key = u * n_items + cand
        pos = np.searchsorted(viewed, key)
        pos[pos == len(viewed)] = 0
        return viewed[pos] == key if len(viewed) else np.zeros(key.shape, bool)

    n_viewed = pd.Series(users).map(pd.Series(users).value_counts()).to_numpy()
    n_free = n_items - n_viewed
    short = n_free < ratio
    if (n_free == 0).any():
        bad = np.unique(users[n_free == 0])
        warnings.warn(f"{len(bad)} user(s) rated every item; no negatives drawn for them", RuntimeWarning)

    neg = np.full((n_pos, ratio), -1, dtype=np.int64)
    easy = np.flatnonzero(~short)
    for j in range(ratio):
        todo = easy
        while len(todo):
            cand = rng.integers(0, n_items, size=len(todo))
            bad = is_viewed(users[todo], cand)
            for k in range(j):
                bad |= neg[todo, k] == cand
            ok = ~bad
            neg[todo[ok], j] = cand[ok]
            todo = todo[bad]
    for p in np.flatnonzero(short & (n_free > 0)):
        seen = set(item_idx[users == users[p]].tolist())
        free = np.array([k for k in range(n_items) if k not in seen], dtype=np.int64)
        neg[p, : len(free)] = rng.permutation(free)

    width = ratio + 1
    out_user = np.repeat(users, width)
    out_item = np.empty((n_pos, width), dtype=np.int64)
    out_item[:, 0] = r["item_id"].to_numpy()
    out_item[:, 1:] = np.where(neg >= 0, item_ids[np.maximum(neg, 0)], -1)
    label = np.zeros((n_pos, width), dtype=np.int64)
    label[:, 0] = 1
    ts = np.full((n_pos, width), -1, dtype=np.int64)
    ts[:, 0] = r["timestamp"].to_numpy()
    valid = np.ones((n_pos, width), dtype=bool)
    valid[:, 1:] = neg >= 0
    valid = valid.ravel()
    return pd.DataFrame({
        "user_id": out_user[valid],
        "item_id": out_item.ravel()[valid],
        "label": label.ravel()[valid],
        "timestamp": ts.ravel()[valid],
    })


# ------------------------------------------------------------------------- history


def build_history(positives: pd.DataFrame, user_id: int, exclude_item: int | None, h_max: int) -> list[int]:
    """Training positives of ``user_id`` ordered oldest to newest, minus ``exclude_item``.

    Truncated to the ``h_max`` most recent. Timestamp ties break on item id.
    """
    rows = positives[(positives["user_id"] == user_id) & (positives["label"] == 1)]
    rows = rows.sort_values(["timestamp", "item_id"], kind="stable")
    items = [int(i) for i in rows["item_id"] if i != exclude_item]
    return items[-h_max:] if h_max > 0 else []


class HistoryIndex:
    """Per-user most-recent training positives, padded for batch lookup.

    ``recent[u]`` holds the ``h_max + 1`` latest item ids of user index ``u``
    right-aligned (oldest first), padded on the left with -1. One extra slot
    lets a positive drop its own item and still keep ``h_max`` entries.
    """

    def __init__(self, train: pd.DataFrame, user_ids: np.ndarray, h_max: int):
        self.h_max = h_max
        self.user_ids = np.asarray(user_ids)
        width = h_max + 1
        self.recent = np.full((len(self.user_ids), width), -1, dtype=np.int64)
        pos = train[train["label"] == 1].sort_values(["user_id", "timestamp", "item_id"], kind="stable")
        if len(pos) and width > 0:
            uidx = np.searchsorted(self.user_ids, pos["user_id"].to_numpy())
            items = pos["item_id"].to_numpy()
            # rank from the end within each user: 0 = newest
            counts = np.bincount(uidx, minlength=len(self.user_ids))
            ends = np.cumsum(counts)
            from_end = ends[uidx] - 1 - np.arange(len(uidx))
            keep = from_end < width
            self.recent[uidx[keep], width - 1 - from_end[keep]] = items[keep]

    def lookup(self, user_idx: np.ndarray, item_ids: np.ndarray) -> np.ndarray:
        """Histories for a batch as a (B, h_max) array of item ids, -1 padded."""
        rows = self.recent[user_idx]
        valid = (rows >= 0) & (rows != np.asarray(item_ids)[:, None])
        # keep only the h_max newest valid entries
        newest_rank = np.cumsum(valid[:, ::-1], axis=1)[:, ::-1]
        valid &= newest_rank <= self.h_max
        out = np.full((len(rows), self.h_max), -1, dtype=np.int64)
        if self.h_max == 0:
            return out
        # right-align the surviving entries
        col = self.h_max - np.cumsum(valid[:, ::-1], axis=1)[:, ::-1]
        r, c = np.nonzero(valid)
        out[r, col[r, c]] = rows[r, c]
        return out

    def history(self, user_id: int, exclude_item: int | None) -> list[int]:
        u = int(np.searchsorted(self.user_ids, user_id))
        row = self.lookup(np.array([u]), np.array([-2 if exclude_item is None else exclude_item]))[0]
        return [int(i) for i in row if i >= 0]


# -------------------------------------------------------------------------- splits


def split_instances(instances: pd.DataFrame, train_frac: float, valid_frac: float, seed: int) -> DatasetSplits:
    """Uniform random train/validation/test partition; test gets the remainder."""
    if train_frac <= 0 or valid_frac <= 0 or train_frac + valid_frac >= 1:
        raise ConfigError("need train_frac > 0, valid_frac > 0 and train_frac + valid_frac < 1", "train_frac")
    n = len(instances)
    n_train = int(round(n * train_frac))
    n_valid = int(round(n * valid_frac))
    if n_train == 0 or n_valid == 0 or n - n_train - n_valid <= 0:
        raise ConfigError(f"split of {n} instances leaves an empty partition", "train_frac")
    perm = np.random.default_rng(seed).permutation(n)
    take = lambda idx: instances.iloc[np.sort(idx)].reset_index(drop=True)  # noqa: E731
    return DatasetSplits(
        take(perm[:n_train]),
        take(perm[n_train:n_train + n_valid]),
        take(perm[n_train + n_valid:]),
        split_seed=seed,
    )


def save_splits(splits: DatasetSplits, path) -> None:
    frames = []
    for name, df in (("train", splits.train), ("valid", splits.valid), ("test", splits.test)):
        frames.append(df[INSTANCE_COLUMNS].assign(split=name))
    pd.concat(frames, ignore_index=True).to_csv(path, sep="\t", index=False, lineterminator="\n")


def load_splits(path, split_seed: int = -1) -> DatasetSplits:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    df = pd.read_csv(path, sep="\t", dtype={c: np.int64 for c in INSTANCE_COLUMNS})
    part = {
        name: df[df["split"] == name][INSTANCE_COLUMNS].reset_index(drop=True)
        for name in ("train", "valid", "test")
    }
    return DatasetSplits(part["train"], part["valid"], part["test"], split_seed)


def iter_instances(df: pd.DataFrame, history: HistoryIndex | None = None):
    """Yield ``LabeledInstance`` rows, attaching histories when an index is given."""
    for row in df.itertuples(index=False):
        hist = tuple(history.history(row.user_id, row.item_id)) if history is not None else ()
        yield LabeledInstance(int(row.user_id), int(row.item_id), int(row.label), hist)


@dataclass
class PreparedData:
    """A dataset variant ready for mining and training."""

    log: InteractionLog
    splits: DatasetSplits
    meta: dict = field(default_factory=dict)


def prepare(log: InteractionLog, neg_ratio: int = 3, seed: int = 0,
            train_frac: float = 0.8, valid_frac: float = 0.1) -> PreparedData:
    instances = sample_negatives(log, neg_ratio, seed)
    splits = split_instances(instances, train_frac, valid_frac, seed)
    meta = {"neg_ratio": neg_ratio, "seed": seed, "train_frac": train_frac, "valid_frac": valid_frac}
    return PreparedData(log, splits, meta)
