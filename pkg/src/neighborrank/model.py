"""Neighbor-enhanced click-through ranking network with hand-written gradients.

Everything is batched numpy in float64. A node's enhanced representation is
built in two steps. First, for each neighbor relation (static, dynamic),
attention over the neighbor set (the node itself always included) gives

    e_j = q . [W h_i || W h_j],   a = softmax(e),   z = relu(sum_j a_j h_j)

Second, the two relation summaries are blended with

    w_r = q_t . tanh(W_t z_r + b_t),   alpha = softmax(w),   Z = sum_r alpha_r z_r

The network input is the concatenation
[user_repr | item_repr | mean(history) | gender | age | occupation | mean(genres)]
fed through a ReLU MLP and a sigmoid output unit.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp

from neighborrank.errors import ConfigError, IntegrityError, NumericError
from neighborrank.ingest import AGE_BUCKETS, GENDERS, GENRES, N_OCCUPATIONS, InteractionLog
from neighborrank.neighbors import KINDS, RELATIONS, NeighborTable

MODES = ("none", "user_only", "item_only", "both")
PROB_EPS = 1e-7


def enhanced_kinds(mode: str) -> tuple[str, ...]:
    if mode not in MODES:
        raise ConfigError(f"enhancement_mode must be one of {MODES}, got {mode!r}", "enhancement_mode")
    return {"none": (), "user_only": ("user",), "item_only": ("item",), "both": ("user", "item")}[mode]


@dataclass
class ModelConfig:
    emb_dim: int = 32
    hidden: tuple[int, ...] = (128, 64, 32)
    type_att_dim: int = 32
    use_demographics: bool = True
    use_genres: bool = True
    init_scale: float = 0.05

    @property
    def n_groups(self) -> int:
        return 3 + 3 * self.use_demographics + self.use_genres


@dataclass
class FeatureSpace:
    """Dense index maps and side features for every user and item of a dataset."""

    user_ids: np.ndarray
    item_ids: np.ndarray
    gender: np.ndarray
    age: np.ndarray
    occupation: np.ndarray
    genres: np.ndarray  # (n_items, max_genres) genre index, -1 padded

    @classmethod
    def from_log(cls, log: InteractionLog) -> "FeatureSpace":
        users = log.users.sort_values("user_id", ignore_index=True)
        items = log.items.sort_values("item_id", ignore_index=True)
        gidx = {g: k for k, g in enumerate(GENRES)}
        lists = [[gidx[g] for g in s.split("|")] for s in items["genres"]]
        width = max((len(g) for g in lists), default=1)
        genres = np.full((len(lists), width), -1, dtype=np.int64)
        for r, g in enumerate(lists):
            genres[r, : len(g)] = g
        return cls(
            user_ids=users["user_id"].to_numpy(np.int64),
            item_ids=items["item_id"].to_numpy(np.int64),
            gender=np.array([GENDERS.index(g) for g in users["gender"]], dtype=np.int64),
            age=np.searchsorted(AGE_BUCKETS, users["age"].to_numpy()),
            occupation=users["occupation"].to_numpy(np.int64),
            genres=genres,
        )

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @staticmethod
    def _lookup(ids: np.ndarray, query, kind: str) -> np.ndarray:
        query = np.asarray(query, dtype=np.int64)
        idx = np.searchsorted(ids, query)
        idx_c = np.minimum(idx, len(ids) - 1)
        bad = (idx >= len(ids)) | (ids[idx_c] != query) if len(ids) else np.ones(query.shape, bool)
        if np.any(bad):
            raise IntegrityError(f"unknown {kind} id {int(np.asarray(query)[bad].ravel()[0])}")
        return idx

    def user_index(self, ids) -> np.ndarray:
        return self._lookup(self.user_ids, ids, "user")

    def item_index(self, ids) -> np.ndarray:
        return self._lookup(self.item_ids, ids, "item")


@dataclass
class Batch:
    user: np.ndarray  # (B,) user index
    item: np.ndarray  # (B,) item index
    label: np.ndarray  # (B,) float 0/1
    hist: np.ndarray  # (B, H) item index, -1 padded

    def __len__(self) -> int:
        return len(self.user)


def make_batch(features: FeatureSpace, rows: pd.DataFrame, history) -> Batch:
    """Encode instance rows; ``history`` is a ``HistoryIndex`` over the training split."""
    user = features.user_index(rows["user_id"].to_numpy())
    items = rows["item_id"].to_numpy()
    hist_ids = history.lookup(np.searchsorted(history.user_ids, rows["user_id"].to_numpy()), items)
    hist = np.where(hist_ids >= 0, features.item_index(np.where(hist_ids >= 0, hist_ids, features.item_ids[0])), -1)
    return Batch(user, features.item_index(items), rows["label"].to_numpy(np.float64), hist)


def instance_batch(features: FeatureSpace, instance) -> Batch:
    """Batch of one from a ``LabeledInstance`` with an explicit history."""
    hist = features.item_index(list(instance.history)) if instance.history else np.empty(0, np.int64)
    return Batch(
        features.user_index([instance.user_id]),
        features.item_index([instance.item_id]),
        np.array([float(instance.label)]),
        hist.reshape(1, -1),
    )


# ------------------------------------------------------------------- primitives


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def masked_softmax(logits: np.ndarray, mask: np.ndarray, axis: int = -1) -> np.ndarray:
    safe = np.where(mask, logits, -np.inf)
    peak = np.max(safe, axis=axis, keepdims=True)
    ex = np.where(mask, np.exp(safe - peak), 0.0)
    return ex / ex.sum(axis=axis, keepdims=True)


def apply_dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool = True):
    """Inverted dropout. Returns the output and the keep mask (all True when inactive)."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}", "dropout")
    if not training or rate == 0:
        return x, np.ones(x.shape, dtype=bool)
    mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate), mask


def bce_loss(p, label) -> float:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    y = np.asarray(label, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def node_level_attention(h_target, h_nbrs, mask, W, q):
    """Attention-pool one relation's neighbor set.

    ``h_target`` (B, d), ``h_nbrs`` (B, K, d) with ``mask`` (B, K) marking real
    members (the target itself should be one of them). Returns z (B, d) and
    a cache for ``node_level_backward``.
    """
    d = h_target.shape[-1]
    # q . [W h_i || W h_j] = (W^T q_head) . h_i + (W^T q_tail) . h_j
    e = (h_target @ (W.T @ q[:d]))[:, None] + h_nbrs @ (W.T @ q[d:])
    a = masked_softmax(e, mask)
    s = (a[:, None, :] @ h_nbrs)[:, 0]
    z = np.maximum(s, 0.0)
    return z, {"h_target": h_target, "h_nbrs": h_nbrs, "e": e, "a": a, "s": s}


def node_level_backward(dz, cache, W, q):
    """Gradients w.r.t. target embeddings, neighbor embeddings, W and q."""
    h_target, h_nbrs, a = cache["h_target"], cache["h_nbrs"], cache["a"]
    d = h_target.shape[-1]
    ds = dz * (cache["s"] > 0)
    da = (h_nbrs @ ds[:, :, None])[..., 0]
    de = a * (da - np.sum(a * da, axis=1, keepdims=True))
    de_sum = de.sum(axis=1)
    t_head = de_sum @ h_target
    t_tail = de.reshape(-1) @ h_nbrs.reshape(-1, d)
    dq = np.concatenate([W @ t_head, W @ t_tail])
    dW = np.outer(q[:d], t_head) + np.outer(q[d:], t_tail)
    dh_target = de_sum[:, None] * (q[:d] @ W)
    dh_nbrs = a[..., None] * ds[:, None, :] + de[..., None] * (q[d:] @ W)
    return dh_target, dh_nbrs, dW, dq


def type_level_attention(z_static, z_dynamic, W, b, q):
    """Blend the static and dynamic summaries (B, d) into one representation."""
    zs = np.stack([z_static, z_dynamic], axis=1)
    u = np.tanh(zs @ W.T + b)
    w = u @ q
    alpha = masked_softmax(w, np.ones(w.shape, dtype=bool))
    # z_d + alpha_s (z_s - z_d) equals the weighted sum but returns z exactly when z_s == z_d
    a_s = alpha[:, :1]
    out = z_dynamic + a_s * (z_static - z_dynamic)
    return out, {"zs": zs, "u": u, "w": w, "alpha": alpha}


def type_level_backward(dZ, cache, W, b, q):
    zs, u, alpha = cache["zs"], cache["u"], cache["alpha"]
    dalpha = np.einsum("bd,btd->bt", dZ, zs)
    a_s = alpha[:, :1]
    dzs = np.stack([a_s * dZ, (1.0 - a_s) * dZ], axis=1)
    dw = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
    dq = np.einsum("bt,btk->k", dw, u)
    dpre = dw[..., None] * q * (1.0 - u * u)
    dW = np.einsum("btk,btd->kd", dpre, zs)
    db = dpre.sum(axis=(0, 1))
    dzs = dzs + dpre @ W
    return dzs[:, 0], dzs[:, 1], dW, db, dq


def _scatter(shape, idx: np.ndarray, rows: np.ndarray) -> np.ndarray:
    idx = idx.reshape(-1)
    rows = rows.reshape(len(idx), -1)
    keep = idx >= 0
    n = int(keep.sum())
    # (n_rows x n) selection matrix times rows sums duplicates in C
    sel = sp.csr_matrix((np.ones(n), (idx[keep], np.arange(n))), shape=(shape[0], n))
    return np.asarray(sel @ rows[keep]).reshape(shape)


# ----------------------------------------------------------------------- model


@dataclass
class ForwardTrace:
    batch: Batch
    prob: np.ndarray
    logit: np.ndarray
    inputs: np.ndarray
    acts: list = field(default_factory=list)  # post-dropout hidden activations
    pre: list = field(default_factory=list)  # hidden pre-activations
    masks: list = field(default_factory=list)
    dropout: float = 0.0
    node: dict = field(default_factory=dict)  # (kind, relation) -> (cache, index array)
    typ: dict = field(default_factory=dict)  # kind -> cache
    hist_count: np.ndarray | None = None
    genre_count: np.ndarray | None = None


class RankModel:
    """Embedding-concatenation MLP ranker with optional neighbor enhancement.

    ``mode`` picks the ablation variant: ``none`` (plain baseline),
    ``user_only``, ``item_only`` or ``both``. In ``none`` mode the neighbor
    table is never read.
    """

    def __init__(self, features: FeatureSpace, config: ModelConfig | None = None,
                 mode: str = "none", neighbors: NeighborTable | None = None):
        self.features = features
        self.config = config or ModelConfig()
        self.mode = mode
        self.kinds = enhanced_kinds(mode)
        if self.kinds and neighbors is None:
            raise ConfigError("neighbor table required for enhancement_mode " + mode, "enhancement_mode")
        self.neighbors = neighbors
        self._nbr_index: dict[tuple[str, str], np.ndarray] = {}

    # -- parameters

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c, f = self.config, self.features
        d = c.emb_dim
        shapes = {
            "user_emb": (f.n_users, d),
            "item_emb": (f.n_items, d),
            "gender_emb": (len(GENDERS), d),
            "age_emb": (len(AGE_BUCKETS), d),
            "occupation_emb": (N_OCCUPATIONS, d),
            "genre_emb": (len(GENRES), d),
        }
        for kind in KINDS:
            for rel in RELATIONS:
                shapes[f"node.{kind}.{rel}.W"] = (d, d)
                shapes[f"node.{kind}.{rel}.q"] = (2 * d,)
            shapes[f"type.{kind}.W"] = (c.type_att_dim, d)
            shapes[f"type.{kind}.b"] = (c.type_att_dim,)
            shapes[f"type.{kind}.q"] = (c.type_att_dim,)
        width = c.n_groups * d
        for k, h in enumerate(c.hidden):
            shapes[f"mlp.{k}.W"] = (width, h)
            shapes[f"mlp.{k}.b"] = (h,)
            width = h
        shapes["out.W"] = (width,)
        shapes["out.b"] = ()
        return shapes

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        """Uniform(-scale, scale) weights, zero biases.

        Each tensor draws from its own stream keyed by (seed, name), so tensors
        shared by all modes start identical regardless of the mode.
        """
        s = self.config.init_scale
        params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape)
            else:
                rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
                params[name] = rng.uniform(-s, s, size=shape)
        return params

    # -- neighbors

    def neighbor_index(self, kind: str, relation: str) -> np.ndarray:
        """(n_nodes, 1 + K) node indices, self first, -1 padded."""
        key = (kind, relation)
        if key not in self._nbr_index:
            nl = self.neighbors.padded(kind, relation)
            lookup = self.features.user_index if kind == "user" else self.features.item_index
            node_ids = self.features.user_ids if kind == "user" else self.features.item_ids
            rows = np.searchsorted(nl.node_ids, node_ids)
            if len(nl.node_ids) == 0 or (rows >= len(nl.node_ids)).any() or (nl.node_ids[rows] != node_ids).any():
                raise IntegrityError(f"neighbor table does not cover every {kind}")
            ids = nl.neighbor_ids[rows]
            nbr = np.where(ids >= 0, lookup(np.where(ids >= 0, ids, node_ids[0])), -1)
            self._nbr_index[key] = np.concatenate([np.arange(len(node_ids))[:, None], nbr], axis=1)
        return self._nbr_index[key]

    # -- forward / backward

    def _enhance(self, params, kind, idx, table, trace):
        zs = []
        for rel in RELATIONS:
            members = self.neighbor_index(kind, rel)[idx]
            mask = members >= 0
            h_nbrs = table[np.maximum(members, 0)] * mask[..., None]
            z, cache = node_level_attention(
                table[idx], h_nbrs, mask, params[f"node.{kind}.{rel}.W"], params[f"node.{kind}.{rel}.q"]
            )
            trace.node[(kind, rel)] = (cache, members)
            zs.append(z)
        out, cache = type_level_attention(
            zs[0], zs[1], params[f"type.{kind}.W"], params[f"type.{kind}.b"], params[f"type.{kind}.q"]
        )
        trace.typ[kind] = cache
        return out

    def forward(self, params, batch: Batch, training: bool = False, dropout: float = 0.0,
                rng: np.random.Generator | None = None, masks: list | None = None):
        """Return click probabilities (B,) and the trace needed by ``backward``.

        Pass ``masks`` to replay recorded dropout masks instead of drawing new ones.
        """
        f, c = self.features, self.config
        ue, ie = params["user_emb"], params["item_emb"]
        trace = ForwardTrace(batch, None, None, None, dropout=dropout if training else 0.0)

        user_repr = self._enhance(params, "user", batch.user, ue, trace) if "user" in self.kinds else ue[batch.user]
        item_repr = self._enhance(params, "item", batch.item, ie, trace) if "item" in self.kinds else ie[batch.item]

        hmask = batch.hist >= 0
        count = hmask.sum(axis=1)
        trace.hist_count = count
        hist_sum = (hmask[:, None, :].astype(np.float64) @ ie[np.maximum(batch.hist, 0)])[:, 0]
        hist_mean = hist_sum / np.maximum(count, 1)[:, None]

        groups = [user_repr, item_repr, hist_mean]
        if c.use_demographics:
            u = batch.user
            groups += [params["gender_emb"][f.gender[u]], params["age_emb"][f.age[u]],
                       params["occupation_emb"][f.occupation[u]]]
        if c.use_genres:
            g = f.genres[batch.item]
            gmask = g >= 0
            trace.genre_count = gmask.sum(axis=1)
            gsum = np.einsum("bg,bgd->bd", gmask.astype(np.float64), params["genre_emb"][np.maximum(g, 0)])
            groups.append(gsum / np.maximum(trace.genre_count, 1)[:, None])

        x = np.concatenate(groups, axis=1)
        trace.inputs = x
        for k in range(len(c.hidden)):
            pre = x @ params[f"mlp.{k}.W"] + params[f"mlp.{k}.b"]
            act = np.maximum(pre, 0.0)
            if masks is not None:
                mask = masks[k]
                act = act * mask / (1.0 - trace.dropout) if trace.dropout else act
            else:
                act, mask = apply_dropout(act, dropout, rng, training)
            trace.pre.append(pre)
            trace.masks.append(mask)
            trace.acts.append(act)
            x = act
        logit = x @ params["out.W"] + params["out.b"]
        trace.logit = logit
        trace.prob = sigmoid(logit)
        return trace.prob, trace

    def backward(self, params, trace: ForwardTrace, grad_output: float = 1.0) -> dict[str, np.ndarray]:
        """Gradient of ``grad_output * mean BCE`` w.r.t. every parameter."""
        c, f, batch = self.config, self.features, trace.batch
        d = c.emb_dim
        grads = {name: np.zeros(shape) for name, shape in self.param_shapes().items()}
        n = len(batch)
        p = trace.prob
        inside = (p > PROB_EPS) & (p < 1 - PROB_EPS)
        dlogit = grad_output * (p - batch.label) * inside / n

        top = trace.acts[-1] if trace.acts else trace.inputs
        grads["out.W"] = top.T @ dlogit
        grads["out.b"] = np.asarray(dlogit.sum())
        dx = np.outer(dlogit, params["out.W"])
        for k in reversed(range(len(c.hidden))):
            if trace.dropout:
                dx = dx * trace.masks[k] / (1.0 - trace.dropout)
            dpre = dx * (trace.pre[k] > 0)
            below = trace.acts[k - 1] if k > 0 else trace.inputs
            grads[f"mlp.{k}.W"] = below.T @ dpre
            grads[f"mlp.{k}.b"] = dpre.sum(axis=0)
            dx = dpre @ params[f"mlp.{k}.W"].T

        parts = np.split(dx, c.n_groups, axis=1)
        d_user, d_item, d_hist = parts[:3]
        rest = parts[3:]
        if c.use_demographics:
            u = batch.user
            grads["gender_emb"] = _scatter(grads["gender_emb"].shape, f.gender[u], rest[0])
            grads["age_emb"] = _scatter(grads["age_emb"].shape, f.age[u], rest[1])
            grads["occupation_emb"] = _scatter(grads["occupation_emb"].shape, f.occupation[u], rest[2])
            rest = rest[3:]
        if c.use_genres:
            g = f.genres[batch.item]
            share = rest[0] / np.maximum(trace.genre_count, 1)[:, None]
            grads["genre_emb"] = _scatter(grads["genre_emb"].shape, g, np.repeat(share[:, None, :], g.shape[1], 1))

        item_rows = [(batch.hist, np.repeat((d_hist / np.maximum(trace.hist_count, 1)[:, None])[:, None, :],
                                            batch.hist.shape[1], 1))]
        user_rows = []
        for kind, dout, direct, rows in (("user", d_user, batch.user, user_rows),
                                         ("item", d_item, batch.item, item_rows)):
            if kind not in self.kinds:
                rows.append((direct, dout))
                continue
            dzs, dzd, dW, db, dq = type_level_backward(
                dout, trace.typ[kind], params[f"type.{kind}.W"], params[f"type.{kind}.b"], params[f"type.{kind}.q"]
            )
            grads[f"type.{kind}.W"], grads[f"type.{kind}.b"], grads[f"type.{kind}.q"] = dW, db, dq
            for rel, dz in zip(RELATIONS, (dzs, dzd)):
                cache, members = trace.node[(kind, rel)]
                dh_t, dh_n, dW, dq = node_level_backward(
                    dz, cache, params[f"node.{kind}.{rel}.W"], params[f"node.{kind}.{rel}.q"]
                )
                grads[f"node.{kind}.{rel}.W"], grads[f"node.{kind}.{rel}.q"] = dW, dq
                rows.append((direct, dh_t))
                rows.append((members, dh_n))

        for name, rows in (("user_emb", user_rows), ("item_emb", item_rows)):
            idx = np.concatenate([r[0].reshape(-1) for r in rows])
            val = np.concatenate([r[1].reshape(-1, d) for r in rows])
            grads[name] = _scatter(grads[name].shape, idx, val)

        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {name}")
        return grads

    def loss_and_grads(self, params, batch: Batch, dropout: float = 0.0, rng=None):
        prob, trace = self.forward(params, batch, training=dropout > 0, dropout=dropout, rng=rng)
        loss = bce_loss(prob, batch.label)
        if not np.isfinite(loss):
            raise NumericError("non-finite training loss")
        return loss, self.backward(params, trace)

    def predict(self, params, batch: Batch) -> np.ndarray:
        return self.forward(params, batch, training=False)[0]


# ------------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ------------------------------------------------------------------ checkpoints


def param_fingerprint(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, params: dict, meta: dict) -> None:
    """npz container: one array per tensor plus a ``__meta__`` JSON string."""
    path = Path(path)
    arrays = {name: np.asarray(a) for name, a in params.items()}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, expected_shapes: dict | None = None):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        params = {k: z[k].astype(np.float64) for k in z.files if k != "__meta__"}
    if expected_shapes is not None:
        if set(expected_shapes) != set(params):
            raise IntegrityError(f"checkpoint tensors differ: {sorted(set(expected_shapes) ^ set(params))}")
        for name, shape in expected_shapes.items():
            if tuple(params[name].shape) != tuple(shape):
                raise IntegrityError(f"shape mismatch for {name}: {params[name].shape} vs {shape}")
    return params, meta
