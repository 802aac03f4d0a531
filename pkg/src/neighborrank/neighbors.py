"""Static (shared-attribute) and dynamic (co-click cosine) neighbor mining.

Static neighbors of a node are the nodes reachable through the most
attribute meta-paths, i.e. sharing the most attribute values (user
demographics, item genres). Dynamic neighbors are the nodes with the highest
cosine similarity between their rows (users) or columns (items) of the
binary training interaction matrix. Lists are ordered by descending score
with ties broken by ascending node id; zero-score candidates and the node
itself are never listed.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd
import scipy.sparse as sp

from neighborrank.errors import ConfigError, IntegrityError
from neighborrank.ingest import InteractionLog

KINDS = ("user", "item")
RELATIONS = ("static", "dynamic")
CHUNK = 512


@dataclass(frozen=True)
class MetaPathSchema:
    kind: str
    attributes: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown node kind {self.kind!r}", "kind")
        if not self.attributes:
            raise ConfigError("meta-path schema needs at least one attribute", "attributes")


USER_SCHEMA = MetaPathSchema("user", ("gender", "age", "occupation"))
USER_SCHEMA_NO_GENDER = MetaPathSchema("user", ("age", "occupation"))
ITEM_SCHEMA = MetaPathSchema("item", ("genres",))


@dataclass(frozen=True)
class Node:
    """A user or item with its attribute values (each attribute a set of values)."""

    kind: str
    node_id: int
    attrs: Mapping[str, frozenset]


def catalog_frame(log: InteractionLog, kind: str) -> pd.DataFrame:
    return log.users if kind == "user" else log.items


def _attr_values(catalog: pd.DataFrame, attr: str) -> list[frozenset]:
    if attr not in catalog.columns:
        raise ConfigError(f"attribute {attr!r} missing from catalog", "attributes")
    col = catalog[attr]
    if attr == "genres":
        return [frozenset(v.split("|")) if v else frozenset() for v in col]
    return [frozenset([v]) for v in col]


def catalog_nodes(catalog: pd.DataFrame, schema: MetaPathSchema) -> list[Node]:
    id_col = "user_id" if schema.kind == "user" else "item_id"
    values = {a: _attr_values(catalog, a) for a in schema.attributes}
    return [
        Node(schema.kind, int(nid), {a: values[a][k] for a in schema.attributes})
        for k, nid in enumerate(catalog[id_col])
    ]


def metapath_count(a: Node, b: Node, schema: MetaPathSchema) -> int:
    """Number of attribute meta-paths linking ``a`` and ``b`` (shared values)."""
    if a.kind != b.kind or a.kind != schema.kind:
        raise ValueError(f"metapath_count needs two {schema.kind} nodes, got {a.kind}/{b.kind}")
    return sum(len(a.attrs[attr] & b.attrs[attr]) for attr in schema.attributes)


def attribute_incidence(catalog: pd.DataFrame, schema: MetaPathSchema) -> sp.csr_matrix:
    """Node x (attribute, value) 0/1 matrix; ``A @ A.T`` gives meta-path counts."""
    rows, cols = [], []
    offset = 0
    for attr in schema.attributes:
        values = _attr_values(catalog, attr)
        vocab = {v: k for k, v in enumerate(sorted(set().union(*values), key=str))}
        for r, vs in enumerate(values):
            for v in vs:
                rows.append(r)
                cols.append(offset + vocab[v])
        offset += len(vocab)
    data = np.ones(len(rows), dtype=np.int64)
    return sp.csr_matrix((data, (rows, cols)), shape=(len(catalog), offset))


def cosine_similarity(a, b) -> float:
    """(a . b) / (|a| |b|), or 0 when either vector is zero."""
    a = a.toarray().ravel() if sp.issparse(a) else np.asarray(a, dtype=np.float64).ravel()
    b = b.toarray().ravel() if sp.issparse(b) else np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    denom = np.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / denom if denom > 0 else 0.0


def _topk_rows(scores: np.ndarray, self_idx: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k columns per row by (score desc, column asc), excluding self and score <= 0."""
    scores = np.asarray(scores, dtype=np.float64).copy()
    scores[np.arange(len(scores)), self_idx] = 0.0
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(scores, order, axis=1)
    keep = top > 0
    idx, top = np.where(keep, order, -1), np.where(keep, top, 0.0)
    if idx.shape[1] < k:
        pad = k - idx.shape[1]
        idx = np.pad(idx, ((0, 0), (0, pad)), constant_values=-1)
        top = np.pad(top, ((0, 0), (0, pad)))
    return idx, top


def _chunked(n: int, fn, n_jobs: int):
    starts = list(range(0, n, CHUNK))
    if n_jobs > 1 and len(starts) > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            parts = list(pool.map(fn, starts))
    else:
        parts = [fn(s) for s in starts]
    if not parts:
        return None
    return tuple(np.concatenate(p) for p in zip(*parts))


def _static_lists(incidence: sp.csr_matrix, k: int, n_jobs: int = 1):
    n = incidence.shape[0]
    at = incidence.T.tocsc()

    def work(start):
        stop = min(start + CHUNK, n)
        counts = (incidence[start:stop] @ at).toarray()
        return _topk_rows(counts, np.arange(start, stop), k)

    out = _chunked(n, work, n_jobs)
    if out is None:
        return np.empty((0, k), np.int64), np.empty((0, k))
    return out


def _cosine_lists(vectors: sp.csr_matrix, k: int, n_jobs: int = 1):
    n = vectors.shape[0]
    vt = vectors.T.tocsc()
    norm2 = np.asarray(vectors.multiply(vectors).sum(axis=1), dtype=np.float64).ravel()

    def work(start):
        stop = min(start + CHUNK, n)
        dots = (vectors[start:stop] @ vt).toarray().astype(np.float64)
        denom = np.sqrt(norm2[start:stop, None] * norm2[None, :])
        sims = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
        return _topk_rows(sims, np.arange(start, stop), k)

    out = _chunked(n, work, n_jobs)
    if out is None:
        return np.empty((0, k), np.int64), np.empty((0, k))
    return out


def static_neighbors(node_id: int, catalog: pd.DataFrame, schema: MetaPathSchema, k: int) -> list[tuple[int, int]]:
    """Up to ``k`` (neighbor_id, metapath_count) pairs for one node."""
    id_col = "user_id" if schema.kind == "user" else "item_id"
    ids = catalog[id_col].to_numpy()
    hit = np.flatnonzero(ids == node_id)
    if not len(hit):
        raise IntegrityError(f"{schema.kind} {node_id} not in catalog")
    order = np.argsort(ids, kind="stable")
    cat = catalog.iloc[order].reset_index(drop=True)
    ids = ids[order]
    a = attribute_incidence(cat, schema)
    t = int(np.flatnonzero(ids == node_id)[0])
    counts = (a[t] @ a.T).toarray()
    idx, sc = _topk_rows(counts, np.array([t]), k)
    return [(int(ids[i]), int(s)) for i, s in zip(idx[0], sc[0]) if i >= 0]


# ------------------------------------------------------------- interaction matrix


@dataclass
class InteractionMatrix:
    """Binary user x item matrix of training positives."""

    matrix: sp.csr_matrix
    user_ids: np.ndarray
    item_ids: np.ndarray

    def row(self, user_id: int) -> sp.csr_matrix:
        return self.matrix[self._index(self.user_ids, user_id, "user")]

    def column(self, item_id: int) -> sp.csr_matrix:
        return self.matrix.T.tocsr()[self._index(self.item_ids, item_id, "item")]

    @staticmethod
    def _index(ids: np.ndarray, node_id: int, kind: str) -> int:
        k = int(np.searchsorted(ids, node_id))
        if k >= len(ids) or ids[k] != node_id:
            raise IntegrityError(f"{kind} {node_id} not in interaction matrix")
        return k


def build_interaction_matrix(train: pd.DataFrame, user_ids=None, item_ids=None) -> InteractionMatrix:
    """Entry (u, i) is 1 iff (u, i, label=1) is in ``train``."""
    pos = train[train["label"] == 1]
    user_ids = np.unique(train["user_id"]) if user_ids is None else np.sort(np.asarray(user_ids))
    item_ids = np.unique(train["item_id"]) if item_ids is None else np.sort(np.asarray(item_ids))
    r = np.searchsorted(user_ids, pos["user_id"].to_numpy())
    c = np.searchsorted(item_ids, pos["item_id"].to_numpy())
    if len(pos) and ((r >= len(user_ids)).any() or (c >= len(item_ids)).any()
                     or (user_ids[np.minimum(r, len(user_ids) - 1)] != pos["user_id"].to_numpy()).any()
                     or (item_ids[np.minimum(c, len(item_ids) - 1)] != pos["item_id"].to_numpy()).any()):
        raise IntegrityError("training positive references a node outside the catalog")
    m = sp.csr_matrix((np.ones(len(pos), dtype=np.int64), (r, c)), shape=(len(user_ids), len(item_ids)))
    m.sum_duplicates()
    m.data[:] = 1
    return InteractionMatrix(m, user_ids, item_ids)


def dynamic_neighbors(node_id: int, matrix: InteractionMatrix, kind: str, k: int) -> list[tuple[int, float]]:
    """Up to ``k`` (neighbor_id, cosine) pairs; users compare rows, items columns."""
    vectors = matrix.matrix if kind == "user" else matrix.matrix.T.tocsr()
    ids = matrix.user_ids if kind == "user" else matrix.item_ids
    t = InteractionMatrix._index(ids, node_id, kind)
    norm2 = np.asarray(vectors.multiply(vectors).sum(axis=1), dtype=np.float64).ravel()
    dots = (vectors[t] @ vectors.T).toarray().astype(np.float64)
    denom = np.sqrt(norm2[t] * norm2[None, :])
    sims = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    idx, sc = _topk_rows(sims, np.array([t]), k)
    return [(int(ids[i]), float(s)) for i, s in zip(idx[0], sc[0]) if i >= 0]


# ------------------------------------------------------------------ neighbor table


@dataclass
class NeighborLists:
    """Padded neighbor lists for one (kind, relation): row k belongs to ``node_ids[k]``."""

    node_ids: np.ndarray
    neighbor_ids: np.ndarray  # (n, K), -1 padded
    scores: np.ndarray  # (n, K)


@dataclass
class NeighborTable:
    lists: dict[tuple[str, str], NeighborLists]
    caps: dict[str, int]
    meta: dict = field(default_factory=dict)

    def padded(self, kind: str, relation: str) -> NeighborLists:
        return self.lists[(kind, relation)]

    def neighbors(self, kind: str, relation: str, node_id: int) -> list[tuple[int, float]]:
        nl = self.lists[(kind, relation)]
        k = int(np.searchsorted(nl.node_ids, node_id))
        if k >= len(nl.node_ids) or nl.node_ids[k] != node_id:
            raise IntegrityError(f"{kind} {node_id} not in neighbor table")
        return [(int(i), float(s)) for i, s in zip(nl.neighbor_ids[k], nl.scores[k]) if i >= 0]

    def to_lines(self) -> list[str]:
        lines = ["node_kind\tnode_id\trelation\trank\tneighbor_id\tscore"]
        for kind in KINDS:
            for rel in RELATIONS:
                nl = self.lists[(kind, rel)]
                for nid, nbrs, scores in zip(nl.node_ids, nl.neighbor_ids, nl.scores):
                    for rank, (j, s) in enumerate(zip(nbrs, scores)):
                        if j < 0:
                            break
                        text = str(int(s)) if rel == "static" else repr(float(s))
                        lines.append(f"{kind}\t{nid}\t{rel}\t{rank}\t{j}\t{text}")
        return lines

    def save(self, path) -> None:
        path = Path(path)
        path.write_text("\n".join(self.to_lines()) + "\n")
        meta = dict(self.meta)
        meta["caps"] = self.caps
        meta["node_ids"] = {
            kind: [int(i) for i in self.lists[(kind, "static")].node_ids] for kind in KINDS
        }
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "NeighborTable":
        path = Path(path)
        meta_path = Path(str(path) + ".meta.json")
        if not path.is_file() or not meta_path.is_file():
            raise FileNotFoundError(f"no neighbor table at {path}")
        meta = json.loads(meta_path.read_text())
        caps = meta.pop("caps")
        node_ids = meta.pop("node_ids")
        df = pd.read_csv(
            path, sep="\t", dtype={"node_kind": str, "relation": str, "score": np.float64},
            float_precision="round_trip",
        )
        lists = {}
        for kind in KINDS:
            ids = np.asarray(node_ids[kind], dtype=np.int64)
            for rel in RELATIONS:
                k = caps[rel]
                nbr = np.full((len(ids), k), -1, dtype=np.int64)
                sc = np.zeros((len(ids), k))
                part = df[(df["node_kind"] == kind) & (df["relation"] == rel)]
                r = np.searchsorted(ids, part["node_id"].to_numpy())
                nbr[r, part["rank"].to_numpy()] = part["neighbor_id"].to_numpy()
                sc[r, part["rank"].to_numpy()] = part["score"].to_numpy()
                lists[(kind, rel)] = NeighborLists(ids, nbr, sc)
        return cls(lists, caps, meta)


def split_fingerprint(train: pd.DataFrame) -> str:
    pos = train[train["label"] == 1][["user_id", "item_id"]].to_numpy(dtype=np.int64)
    pos = pos[np.lexsort((pos[:, 1], pos[:, 0]))] if len(pos) else pos
    return hashlib.sha256(np.ascontiguousarray(pos).tobytes()).hexdigest()[:16]


def build_neighbor_table(
    log: InteractionLog,
    train: pd.DataFrame,
    k_static: int = 50,
    k_dynamic: int = 10,
    user_schema: MetaPathSchema = USER_SCHEMA,
    item_schema: MetaPathSchema = ITEM_SCHEMA,
    n_jobs: int = 1,
) -> NeighborTable:
    """Mine both neighbor relations for every user and item in ``log``'s catalogs.

    Dynamic neighbors come from the training split only.
    """
    if k_static < 1 or k_dynamic < 1:
        raise ConfigError("neighbor caps must be positive", "k_static")
    users = log.users.sort_values("user_id", ignore_index=True)
    items = log.items.sort_values("item_id", ignore_index=True)
    user_ids = users["user_id"].to_numpy(dtype=np.int64)
    item_ids = items["item_id"].to_numpy(dtype=np.int64)
    im = build_interaction_matrix(train, user_ids, item_ids)

    lists = {}
    for kind, cat, ids, schema, vectors in (
        ("user", users, user_ids, user_schema, im.matrix),
        ("item", items, item_ids, item_schema, im.matrix.T.tocsr()),
    ):
        idx, sc = _static_lists(attribute_incidence(cat, schema), k_static, n_jobs)
        lists[(kind, "static")] = NeighborLists(ids, np.where(idx >= 0, ids[np.maximum(idx, 0)], -1), sc)
        idx, sc = _cosine_lists(vectors, k_dynamic, n_jobs)
        lists[(kind, "dynamic")] = NeighborLists(ids, np.where(idx >= 0, ids[np.maximum(idx, 0)], -1), sc)

    meta = {
        "user_schema": list(user_schema.attributes),
        "item_schema": list(item_schema.attributes),
        "source_split": split_fingerprint(train),
    }
    return NeighborTable(lists, {"static": k_static, "dynamic": k_dynamic}, meta)
