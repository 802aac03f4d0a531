"""Exhaustive reference implementations used as independent test oracles."""

from __future__ import annotations

import math

def pairwise_auc(scores, labels):
    """O(n^2) oracle: fraction of (pos, neg) pairs ordered correctly, ties worth one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def _shared(a: dict, b: dict, attributes) -> int:
    total = 0
    for attr in attributes:
        if attr == "genres":
            total += len(set(a[attr].split("|")) & set(b[attr].split("|")))
        else:
            total += int(a[attr] == b[attr])
    return total


def brute_static(catalog, schema, node_id, k):
    """Rank every other catalog row by shared attribute values, read straight from the rows."""
    id_col = f"{schema.kind}_id"
    rows = {int(r[id_col]): r for r in catalog.to_dict(orient="records")}
    target = rows[node_id]
    scored = [(nid, _shared(target, r, schema.attributes)) for nid, r in rows.items() if nid != node_id]
    scored = [s for s in scored if s[1] > 0]
    return sorted(scored, key=lambda s: (-s[1], s[0]))[:k]


def brute_dynamic(sets: dict[int, set], node_id, k):
    a = sets[node_id]
    scored = []
    for other, b in sets.items():
        if other == node_id or not a or not b:
            continue
        s = len(a & b) / math.sqrt(len(a) * len(b))
        if s > 0:
            scored.append((other, s))
    return sorted(scored, key=lambda s: (-s[1], s[0]))[:k]


def positive_sets(train, kind):
    pos = train[train["label"] == 1]
    key, val = ("user_id", "item_id") if kind == "user" else ("item_id", "user_id")
    out: dict[int, set] = {}
    for a, b in zip(pos[key], pos[val]):
        out.setdefault(int(a), set()).add(int(b))
    return out
