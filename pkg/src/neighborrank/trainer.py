"""Minibatch training with seeded shuffling and early stopping on validation AUC."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from neighborrank.errors import ConfigError, NumericError
from neighborrank.evaluation import auc
from neighborrank.ingest import DatasetSplits, HistoryIndex, InteractionLog
from neighborrank.model import (
    MODES, AdamState, Batch, FeatureSpace, ModelConfig, RankModel, adam_step, param_fingerprint,
)
from neighborrank.neighbors import NeighborTable

log = logging.getLogger(__name__)

EVAL_CHUNK = 4096


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    dropout: float = 0.3
    batch_size: int = 256
    max_epochs: int = 30
    early_stop_patience: int = 3
    seed: int = 0
    enhancement_mode: str = "both"
    h_max: int = 30
    k_static: int = 50
    k_dynamic: int = 10
    emb_dim: int = 32
    hidden: tuple[int, ...] = (128, 64, 32)
    type_att_dim: int = 32
    use_demographics: bool = True
    use_genres: bool = True
    user_metapath_gender: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        checks = [
            ("learning_rate", self.learning_rate > 0),
            ("dropout", 0 <= self.dropout < 1),
            ("batch_size", self.batch_size >= 1),
            ("max_epochs", self.max_epochs >= 0),
            ("early_stop_patience", self.early_stop_patience >= 1),
            ("enhancement_mode", self.enhancement_mode in MODES),
            ("h_max", self.h_max >= 0),
            ("k_static", self.k_static >= 1),
            ("k_dynamic", self.k_dynamic >= 1),
            ("emb_dim", self.emb_dim >= 1),
            ("hidden", all(h >= 1 for h in self.hidden)),
            ("type_att_dim", self.type_att_dim >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"invalid value for {name}: {getattr(self, name)!r}", name)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            emb_dim=self.emb_dim, hidden=self.hidden, type_att_dim=self.type_att_dim,
            use_demographics=self.use_demographics, use_genres=self.use_genres,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def fingerprint(self) -> str:
        import hashlib
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config field {key!r}", key)
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Flat JSON object whose keys are ``TrainConfig`` field names."""
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
            raise ConfigError("config file must be a flat key-value object")
        return cls.from_dict(data)

    def to_file(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass
class TrainRecord:
    epoch: int
    train_loss: float
    valid_auc: float
    seconds: float
    fingerprint: str


TRAIN_LOG_HEADER = "epoch\ttrain_loss\tvalid_auc\tseconds\tfingerprint"


def append_train_log(path, record: TrainRecord) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a") as fh:
        if new:
            fh.write(TRAIN_LOG_HEADER + "\n")
        fh.write(f"{record.epoch}\t{record.train_loss!r}\t{record.valid_auc!r}\t{record.seconds:.3f}\t{record.fingerprint}\n")


def shuffle_batches(n: int, batch_size: int, epoch: int, seed: int) -> list[np.ndarray]:
    """Index batches for one epoch; the permutation depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1", "batch_size")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[k:k + batch_size] for k in range(0, n, batch_size)]


class EncodedSplit:
    """Instance rows pre-mapped to dense indices; histories are looked up per batch."""

    def __init__(self, df: pd.DataFrame, features: FeatureSpace, history: HistoryIndex):
        self.features = features
        self.history = history
        self.user = features.user_index(df["user_id"].to_numpy())
        self.item_ids = df["item_id"].to_numpy(np.int64)
        self.item = features.item_index(self.item_ids)
        self.label = df["label"].to_numpy(np.float64)

    def __len__(self) -> int:
        return len(self.user)

    def batch(self, idx: np.ndarray | slice) -> Batch:
        hist_ids = self.history.lookup(self.user[idx], self.item_ids[idx])
        valid = hist_ids >= 0
        hist = np.full(hist_ids.shape, -1, dtype=np.int64)
        if valid.any():
            hist[valid] = self.features.item_index(hist_ids[valid])
        return Batch(self.user[idx], self.item[idx], self.label[idx], hist)


def predict_split(model: RankModel, params: dict, data: EncodedSplit) -> np.ndarray:
    out = np.empty(len(data))
    for k in range(0, len(data), EVAL_CHUNK):
        sl = slice(k, k + EVAL_CHUNK)
        out[sl] = model.predict(params, data.batch(sl))
    return out


@dataclass
class TrainResult:
    params: dict
    records: list[TrainRecord]
    model: RankModel
    history: HistoryIndex
    best_epoch: int = 0
    steps: int = 0
    extra: dict = field(default_factory=dict)


def build_model(log_: InteractionLog, splits: DatasetSplits, neighbor_table: NeighborTable | None,
                config: TrainConfig) -> tuple[RankModel, HistoryIndex]:
    features = FeatureSpace.from_log(log_)
    history = HistoryIndex(splits.train, features.user_ids, config.h_max)
    model = RankModel(features, config.model_config(), config.enhancement_mode, neighbor_table)
    return model, history


def train(log_: InteractionLog, splits: DatasetSplits, neighbor_table: NeighborTable | None,
          config: TrainConfig, log_path=None) -> TrainResult:
    """Train one model; returns the parameters of the best-validation-AUC epoch."""
    config.validate()
    if len(splits.train) == 0:
        raise ConfigError("empty training split", "train_frac")
    if len(splits.valid) == 0:
        raise ConfigError("empty validation split", "valid_frac")
    model, history = build_model(log_, splits, neighbor_table, config)
    params = model.init_params(config.seed)
    result = TrainResult(params, [], model, history)
    if config.max_epochs == 0:
        return result

    train_data = EncodedSplit(splits.train, model.features, history)
    valid_data = EncodedSplit(splits.valid, model.features, history)
    state = AdamState(lr=config.learning_rate)
    best_auc, best_params, best_epoch, stale = -np.inf, None, 0, 0

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        drop_rng = np.random.default_rng([config.seed, epoch, 1])
        total, count = 0.0, 0
        for idx in shuffle_batches(len(train_data), config.batch_size, epoch, config.seed):
            batch = train_data.batch(idx)
            try:
                loss, grads = model.loss_and_grads(params, batch, config.dropout, drop_rng)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, step {state.step + 1}: {exc}") from exc
            adam_step(params, grads, state)
            total += loss * len(idx)
            count += len(idx)
        valid_auc = auc(predict_split(model, params, valid_data), valid_data.label)
        rec = TrainRecord(epoch, total / count, valid_auc, time.perf_counter() - t0, param_fingerprint(params))
        result.records.append(rec)
        if log_path is not None:
            append_train_log(log_path, rec)
        log.info("epoch %d loss %.5f valid_auc %.5f (%.1fs)", epoch, rec.train_loss, valid_auc, rec.seconds)
        if valid_auc > best_auc:
            best_auc, best_epoch, stale = valid_auc, epoch, 0
            best_params = {k: v.copy() for k, v in params.items()}
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break

    result.params = best_params
    result.best_epoch = best_epoch
    result.steps = state.step
    return result
