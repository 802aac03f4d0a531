"""Dataset variants and multi-seed ablations used by the scripts and the real-data checks."""

from __future__ import annotations

import logging

from neighborrank.evaluation import MODEL_VARIANTS, EvalReport, run_ablation
from neighborrank.ingest import InteractionLog, derive_longtail, derive_sparse, prepare
from neighborrank.neighbors import (
    USER_SCHEMA, USER_SCHEMA_NO_GENDER, build_neighbor_table, split_fingerprint,
)
from neighborrank.trainer import TrainConfig

log = logging.getLogger(__name__)

FULL, LONGTAIL, SPARSE = "ml-1m", "ml-1m-longtail", "ml-1m-longtail-sparse"


def dataset_variants(full: InteractionLog, fraction: float = 0.1, cap: int = 30, seed: int = 0) -> dict:
    """The full log, its exact-count subsample, and that subsample with heavy users removed."""
    longtail = derive_longtail(full, fraction, seed)
    return {FULL: full, LONGTAIL: longtail, SPARSE: derive_sparse(longtail, cap)}


def ablate_dataset(data: InteractionLog, name: str, seeds, config: TrainConfig | None = None,
                   variants=tuple(MODEL_VARIANTS), split_seed: int = 0, n_jobs: int = 1,
                   on_report=None) -> list[EvalReport]:
    """Negatives, split, mining, then every requested variant for every seed."""
    config = config or TrainConfig()
    prepared = prepare(data, seed=split_seed)
    schema = USER_SCHEMA if config.user_metapath_gender else USER_SCHEMA_NO_GENDER
    table = build_neighbor_table(prepared.log, prepared.splits.train, config.k_static, config.k_dynamic,
                                 user_schema=schema, n_jobs=n_jobs)
    log.info("%s: %s, instances %s", name, data.stats_line(), prepared.splits.sizes())
    return run_ablation(prepared, table, list(seeds), config, dataset_variant=name, variants=variants,
                        dataset_fingerprint=split_fingerprint(prepared.splits.train), on_report=on_report)
