"""Command-line pipeline: ingest, derive, mine, train, eval, ablate.

Artifacts live under a workspace directory (``--workspace`` or the
``NEIGHBORRANK_WORKSPACE`` environment variable, default ``./workspace``)::

    datasets/<name>/            interaction log (TSV) + meta.json
    prepared/<name>-s<seed>/    instance splits + neighbor table
    runs/<run>/                 checkpoint, config, per-epoch log
    reports/                    evaluation rows, summaries, markdown tables
    manifest.json               fingerprints of everything above

Each command records a key derived from its inputs and parameters; when the
key and the stored output fingerprint still match, the command reports a
cache hit and does nothing. Exit codes: 0 success, 2 usage/config/data
error, 3 numeric or internal failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from neighborrank.errors import ConfigError, IntegrityError, NumericError
from neighborrank.evaluation import MODEL_VARIANTS, evaluate, markdown_table, run_ablation, write_reports
from neighborrank.ingest import (
    PreparedData, derive_longtail, derive_sparse, load_log, load_movielens_dir, load_splits, prepare,
    save_log, save_splits,
)
from neighborrank.model import load_checkpoint, param_fingerprint, save_checkpoint
from neighborrank.neighbors import USER_SCHEMA, USER_SCHEMA_NO_GENDER, NeighborTable, build_neighbor_table
from neighborrank.trainer import TrainConfig, build_model, train

log = logging.getLogger("neighborrank")

WORKSPACE_ENV = "NEIGHBORRANK_WORKSPACE"
SOURCE_FILES = ("ratings.dat", "users.dat", "movies.dat")


class MissingArtifact(ConfigError):
    """An upstream artifact has not been produced yet."""


# ------------------------------------------------------------------ fingerprints


def fingerprint_path(path: Path) -> str:
    """sha256 over relative names and bytes of a file or every file below a directory."""
    path = Path(path)
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        h.update(str(f.relative_to(path) if f != path else f.name).encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def _key(**parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


class Workspace:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.manifest_path = self.root / "manifest.json"

    def lock(self) -> FileLock:
        self.root.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.root / ".lock"))

    def manifest(self) -> dict:
        if self.manifest_path.is_file():
            return json.loads(self.manifest_path.read_text())
        return {"artifacts": {}}

    def record(self, name: str, path: Path, fingerprint: str, key: str, **info) -> None:
        doc = self.manifest()
        doc["artifacts"][name] = {
            "path": str(Path(path).relative_to(self.root)), "fingerprint": fingerprint, "key": key, **info,
        }
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.manifest_path)

    def entry(self, name: str) -> dict | None:
        return self.manifest()["artifacts"].get(name)

    def cached(self, name: str, key: str, current_fp) -> bool:
        """True when ``name`` was built with ``key`` and its output is unchanged."""
        e = self.entry(name)
        if e is None or e.get("key") != key:
            return False
        path = self.root / e["path"]
        if not path.exists():
            return False
        try:
            return current_fp(path) == e["fingerprint"]
        except (OSError, ValueError):
            return False

    def require(self, name: str, hint: str) -> dict:
        e = self.entry(name)
        if e is None or not (self.root / e["path"]).exists():
            raise MissingArtifact(f"missing upstream artifact {name!r}; run `{hint}` first")
        return e

    def dataset_dir(self, name: str) -> Path:
        return self.root / "datasets" / name

    def prepared_dir(self, dataset: str, seed: int) -> Path:
        return self.root / "prepared" / f"{dataset}-s{seed}"

    def run_dir(self, run: str) -> Path:
        return self.root / "runs" / run


def _checkpoint_fp(run_dir: Path) -> str:
    params, _ = load_checkpoint(Path(run_dir) / "params.npz")
    return param_fingerprint(params)


# ---------------------------------------------------------------------- commands


def cmd_ingest(ws: Workspace, args) -> int:
    src = Path(args.source)
    for name in SOURCE_FILES:
        if not (src / name).is_file():
            raise FileNotFoundError(f"no such file: {src / name}")
    src_fp = _key(**{n: fingerprint_path(src / n) for n in SOURCE_FILES})
    out = ws.dataset_dir(args.name)
    art = f"dataset:{args.name}"
    key = _key(cmd="ingest", source=src_fp)
    if ws.cached(art, key, fingerprint_path):
        print(f"cache hit: {art}")
        print(ws.entry(art)["stats"])
        return 0
    data = load_movielens_dir(src)
    save_log(data, out, {"source": str(src), "source_fingerprint": src_fp})
    ws.record(art, out, fingerprint_path(out), key, stats=data.stats_line())
    print(data.stats_line())
    return 0


def cmd_derive(ws: Workspace, args) -> int:
    up = ws.require(f"dataset:{args.source}", "neighborrank ingest")
    if args.variant == "longtail":
        if args.fraction is None:
            raise ConfigError("--fraction is required for the longtail variant", "fraction")
        default = f"{args.source}-lt{args.fraction:g}-s{args.seed}"
        params = {"fraction": args.fraction, "seed": args.seed}
    else:
        if args.cap is None:
            raise ConfigError("--cap is required for the sparse variant", "cap")
        default = f"{args.source}-sparse{args.cap}"
        params = {"cap": args.cap}
    name = args.name or default
    art = f"dataset:{name}"
    key = _key(cmd="derive", variant=args.variant, upstream=up["fingerprint"], **params)
    if ws.cached(art, key, fingerprint_path):
        print(f"cache hit: {art}")
        print(ws.entry(art)["stats"])
        return 0
    base = load_log(ws.dataset_dir(args.source))
    if args.variant == "longtail":
        data = derive_longtail(base, args.fraction, args.seed)
    else:
        data = derive_sparse(base, args.cap)
    out = ws.dataset_dir(name)
    save_log(data, out, {"parent": args.source, "variant": args.variant, **params})
    fp = fingerprint_path(out)
    per_user = data.ratings.groupby("user_id").size()
    stats = f"{data.stats_line()} (max {int(per_user.max()) if len(per_user) else 0} per user)"
    ws.record(art, out, fp, key, stats=stats, parent=args.source)
    print(f"{name}: {stats}")
    print(f"fingerprint {fp}")
    return 0


def cmd_mine(ws: Workspace, args) -> int:
    up = ws.require(f"dataset:{args.dataset}", "neighborrank ingest/derive")
    out = ws.prepared_dir(args.dataset, args.seed)
    art = f"prepared:{args.dataset}-s{args.seed}"
    params = dict(neg_ratio=args.neg_ratio, seed=args.seed, train_frac=args.train_frac,
                  valid_frac=args.valid_frac, k_static=args.k_static, k_dynamic=args.k_dynamic,
                  gender=not args.no_gender)
    key = _key(cmd="mine", upstream=up["fingerprint"], **params)
    if ws.cached(art, key, fingerprint_path):
        print(f"cache hit: {art}")
        return 0
    data = load_log(ws.dataset_dir(args.dataset))
    prep = prepare(data, args.neg_ratio, args.seed, args.train_frac, args.valid_frac)
    out.mkdir(parents=True, exist_ok=True)
    save_splits(prep.splits, out / "splits.tsv")
    (out / "meta.json").write_text(json.dumps(prep.meta, indent=2, sort_keys=True) + "\n")
    schema = USER_SCHEMA if not args.no_gender else USER_SCHEMA_NO_GENDER
    table = build_neighbor_table(data, prep.splits.train, args.k_static, args.k_dynamic,
                                 user_schema=schema, n_jobs=args.jobs)
    table.save(out / "neighbors.tsv")
    ws.record(art, out, fingerprint_path(out), key, dataset=args.dataset, **params)
    tr, va, te = prep.splits.sizes()
    print(f"instances: train {tr} / valid {va} / test {te}")
    print(f"neighbor table: {out / 'neighbors.tsv'}")
    return 0


def _load_prepared(ws: Workspace, dataset: str, seed: int, need_table: bool):
    ws.require(f"dataset:{dataset}", "neighborrank ingest/derive")
    out = ws.prepared_dir(dataset, seed)
    entry = ws.entry(f"prepared:{dataset}-s{seed}")
    if entry is None or not (out / "splits.tsv").is_file():
        if need_table:
            raise MissingArtifact(
                f"neighbor table required for this enhancement mode; run `neighborrank mine --dataset {dataset} --seed {seed}`"
            )
        raise MissingArtifact(f"no instance splits for {dataset}; run `neighborrank mine --dataset {dataset}`")
    data = load_log(ws.dataset_dir(dataset))
    prep = PreparedData(data, load_splits(out / "splits.tsv", seed), json.loads((out / "meta.json").read_text()))
    table = NeighborTable.load(out / "neighbors.tsv") if need_table else None
    return prep, table, entry


def _train_config(args) -> TrainConfig:
    base = TrainConfig.from_file(args.config).to_dict() if args.config else {}
    overrides = {
        "seed": args.seed, "enhancement_mode": args.mode, "max_epochs": args.epochs,
        "learning_rate": args.lr, "batch_size": args.batch_size, "dropout": args.dropout,
        "early_stop_patience": args.patience,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    for item in args.set or []:
        k, sep, v = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}", k)
        try:
            base[k] = json.loads(v)
        except json.JSONDecodeError:
            base[k] = v
    return TrainConfig.from_dict(base)


def cmd_train(ws: Workspace, args) -> int:
    cfg = _train_config(args)
    prep, table, entry = _load_prepared(ws, args.dataset, args.split_seed, cfg.enhancement_mode != "none")
    run = args.run or f"{args.dataset}-s{args.split_seed}-{cfg.enhancement_mode}-seed{cfg.seed}"
    art = f"run:{run}"
    key = _key(cmd="train", upstream=entry["fingerprint"], config=cfg.to_dict())
    if ws.cached(art, key, _checkpoint_fp):
        print(f"cache hit: {art}")
        return 0
    out = ws.run_dir(run)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_log.tsv").unlink(missing_ok=True)
    result = train(prep.log, prep.splits, table, cfg, log_path=out / "train_log.tsv")
    meta = {"config": cfg.to_dict(), "dataset": args.dataset, "split_seed": args.split_seed,
            "best_epoch": result.best_epoch}
    save_checkpoint(out / "params.npz", result.params, meta)
    cfg.to_file(out / "config.json")
    fp = param_fingerprint(result.params)
    ws.record(art, out, fp, key, dataset=args.dataset, split_seed=args.split_seed, best_epoch=result.best_epoch)
    best = result.records[result.best_epoch - 1].valid_auc if result.records else float("nan")
    print(f"run {run}: best epoch {result.best_epoch}, valid AUC {best:.4f}, params {fp}")
    return 0


def cmd_eval(ws: Workspace, args) -> int:
    run_entry = ws.require(f"run:{args.run}", "neighborrank train")
    run_dir = ws.run_dir(args.run)
    params, meta = load_checkpoint(run_dir / "params.npz")
    cfg = TrainConfig.from_dict(meta["config"])
    prep, table, prep_entry = _load_prepared(ws, meta["dataset"], meta["split_seed"], cfg.enhancement_mode != "none")
    model, history = build_model(prep.log, prep.splits, table, cfg)
    params, _ = load_checkpoint(run_dir / "params.npz", model.param_shapes())
    report = evaluate(
        model, params, prep.splits.test, history, dataset_variant=meta["dataset"], seed=cfg.seed,
        n_train=len(prep.splits.train), n_valid=len(prep.splits.valid),
        config_fingerprint=cfg.fingerprint(), dataset_fingerprint=prep_entry["fingerprint"],
    )
    report.best_epoch = int(meta.get("best_epoch", 0))
    out = ws.root / "reports" / f"{args.run}.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_reports([report], out)
    ws.record(f"report:{args.run}", out, fingerprint_path(out), _key(run=run_entry["fingerprint"]))
    print(f"{args.run}: test AUC {report.auc:.4f} on {report.n_test} instances")
    return 0


def cmd_ablate(ws: Workspace, args) -> int:
    cfg = _train_config(args)
    prep, table, entry = _load_prepared(ws, args.dataset, args.split_seed, True)
    name = args.name or f"ablate-{args.dataset}-s{args.split_seed}"
    art = f"report:{name}"
    out = ws.root / "reports" / f"{name}.tsv"
    key = _key(cmd="ablate", upstream=entry["fingerprint"], config=cfg.to_dict(), seeds=args.seeds,
               variants=args.variants)
    if ws.cached(art, key, fingerprint_path):
        print(f"cache hit: {art}")
        print((ws.root / "reports" / f"{name}.md").read_text())
        return 0

    def progress(rep):
        print(f"  {rep.model_variant:<10} seed {rep.seed}: test AUC {rep.auc:.4f}", flush=True)

    reports = run_ablation(prep, table, args.seeds, cfg, dataset_variant=args.dataset, variants=tuple(args.variants),
                           dataset_fingerprint=entry["fingerprint"], on_report=progress)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_reports(reports, out)
    md = markdown_table(reports)
    (ws.root / "reports" / f"{name}.md").write_text(md + "\n")
    ws.record(art, out, fingerprint_path(out), key, seeds=args.seeds)
    print(md)
    return 0


# -------------------------------------------------------------------------- main


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON file of training settings")
    p.add_argument("--seed", type=int, help="model seed (init, shuffling, dropout)")
    p.add_argument("--epochs", type=int, help="maximum epochs")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--patience", type=int, help="early-stopping patience in epochs")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neighborrank", description=__doc__.split("\n")[0])
    ap.add_argument("--workspace", help=f"artifact root (default ${WORKSPACE_ENV} or ./workspace)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a MovieLens 1M directory")
    p.add_argument("source", help="directory with ratings.dat, users.dat, movies.dat")
    p.add_argument("--name", default="ml-1m")

    p = sub.add_parser("derive", help="build a long-tail or sparse variant")
    p.add_argument("variant", choices=["longtail", "sparse"])
    p.add_argument("--from", dest="source", default="ml-1m")
    p.add_argument("--fraction", type=float)
    p.add_argument("--cap", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name")

    p = sub.add_parser("mine", help="sample negatives, split, and mine neighbor lists")
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--neg-ratio", type=int, default=3)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--valid-frac", type=float, default=0.1)
    p.add_argument("--k-static", type=int, default=50)
    p.add_argument("--k-dynamic", type=int, default=10)
    p.add_argument("--no-gender", action="store_true", help="user meta-paths over age and occupation only")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--mode", choices=["none", "user_only", "item_only", "both"])
    p.add_argument("--run")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="score the test split with a trained run")
    p.add_argument("--run", required=True)

    p = sub.add_parser("ablate", help="all four model variants over several seeds")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", choices=list(MODEL_VARIANTS), default=list(MODEL_VARIANTS))
    p.add_argument("--name")
    _add_train_flags(p)
    p.set_defaults(mode=None)
    return ap


COMMANDS = {
    "ingest": cmd_ingest, "derive": cmd_derive, "mine": cmd_mine,
    "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    ws = Workspace(Path(args.workspace or os.environ.get(WORKSPACE_ENV, "workspace")))
    try:
        with ws.lock().acquire(timeout=0):
            return COMMANDS[args.command](ws, args)
    except Timeout:
        print(f"error: workspace {ws.root} is locked by another process", file=sys.stderr)
        return 2
    except ConfigError as exc:
        field = f" (field: {exc.field})" if exc.field else ""
        print(f"error: {exc}{field}", file=sys.stderr)
        return 2
    except (IntegrityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - stable exit code for scripting
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
