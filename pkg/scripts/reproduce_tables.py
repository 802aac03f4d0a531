"""Multi-seed ablations on MovieLens 1M and its long-tail variants.

    python3 scripts/reproduce_tables.py /path/to/ml-1m --out results/

Writes one report TSV (plus summary JSON) and one markdown table per dataset
variant. Full-size 1M runs take hours on a single core; pick variants with
``--datasets``.
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from neighborrank.evaluation import MODEL_VARIANTS, markdown_table, write_reports
from neighborrank.experiments import FULL, LONGTAIL, SPARSE, ablate_dataset, dataset_variants
from neighborrank.ingest import load_movielens_dir
from neighborrank.trainer import TrainConfig

SLUGS = {FULL: "ml1m", LONGTAIL: "ml1m_longtail", SPARSE: "ml1m_longtail_sparse"}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("ml1m", help="directory with ratings.dat, users.dat, movies.dat")
    ap.add_argument("--out", default="results")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--datasets", nargs="+", choices=list(SLUGS.values()), default=list(SLUGS.values()))
    ap.add_argument("--variants", nargs="+", choices=list(MODEL_VARIANTS), default=list(MODEL_VARIANTS))
    ap.add_argument("--derive-seed", type=int, default=0)
    ap.add_argument("--config", help="flat JSON training config")
    ap.add_argument("--jobs", type=int, default=1, help="threads for neighbor mining")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logs = dataset_variants(load_movielens_dir(args.ml1m), fraction=0.1, cap=30, seed=args.derive_seed)
    for name, data in logs.items():
        if SLUGS[name] not in args.datasets:
            continue
        print(f"{name}: {data.stats_line()}", flush=True)
        reports = ablate_dataset(
            data, name, args.seeds, config, variants=tuple(args.variants), n_jobs=args.jobs,
            on_report=lambda r: print(f"  {r.model_variant:<10} seed {r.seed}: {r.auc:.4f}", flush=True),
        )
        write_reports(reports, out / f"{SLUGS[name]}.tsv")
        md = markdown_table(reports)
        (out / f"{SLUGS[name]}.md").write_text(md + "\n")
        print(md, flush=True)


if __name__ == "__main__":
    main()
