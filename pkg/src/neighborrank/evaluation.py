"""AUC, test-set evaluation reports and the four-way ablation harness."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from neighborrank.errors import UndefinedMetricError

MODEL_VARIANTS = {"baseline": "none", "item_only": "item_only", "user_only": "user_only", "both": "both"}
VARIANT_LABELS = {
    "baseline": "baseline (no neighbors)",
    "both": "user + item neighbors",
    "user_only": "user neighbors",
    "item_only": "item neighbors",
}


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(positive scores above negative), ties count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    # average 1-based rank for each run of tied scores
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(len(s))
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    dataset_variant: str
    model_variant: str
    seed: int
    auc: float
    n_test: int
    n_test_pos: int
    n_train: int
    n_valid: int
    best_epoch: int = 0
    config_fingerprint: str = ""
    dataset_fingerprint: str = ""
    param_fingerprint: str = ""

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"AUC out of range: {self.auc}")


REPORT_COLUMNS = [f.name for f in dataclasses.fields(EvalReport)]


def evaluate(model, params, test: pd.DataFrame, history, *, dataset_variant: str = "",
             model_variant: str | None = None, seed: int = 0, n_train: int = 0, n_valid: int = 0,
             **fingerprints) -> EvalReport:
    """Score ``test`` once per instance with dropout off and compute pooled AUC."""
    from neighborrank.trainer import EncodedSplit, predict_split

    data = EncodedSplit(test, model.features, history)
    scores = predict_split(model, params, data)
    if model_variant is None:
        model_variant = next(k for k, v in MODEL_VARIANTS.items() if v == model.mode)
    from neighborrank.model import param_fingerprint
    return EvalReport(
        dataset_variant=dataset_variant, model_variant=model_variant, seed=seed,
        auc=auc(scores, data.label), n_test=len(data), n_test_pos=int(data.label.sum()),
        n_train=n_train, n_valid=n_valid, param_fingerprint=param_fingerprint(params), **fingerprints,
    )


def reports_frame(reports: list[EvalReport]) -> pd.DataFrame:
    return pd.DataFrame([dataclasses.asdict(r) for r in reports], columns=REPORT_COLUMNS)


def write_reports(reports: list[EvalReport], path) -> None:
    """Tab-separated rows plus a ``.summary.json`` next to them."""
    path = Path(path)
    reports_frame(reports).to_csv(path, sep="\t", index=False, lineterminator="\n")
    summary = summarize(reports)
    doc = {
        "reports": [dataclasses.asdict(r) for r in reports],
        "summary": summary.reset_index().to_dict(orient="records"),
    }
    Path(str(path) + ".summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_reports(path) -> list[EvalReport]:
    df = pd.read_csv(path, sep="\t", keep_default_na=False, float_precision="round_trip",
                     dtype={"dataset_variant": str, "model_variant": str, "config_fingerprint": str,
                            "dataset_fingerprint": str, "param_fingerprint": str})
    return [EvalReport(**row) for row in df.to_dict(orient="records")]


def summarize(reports: list[EvalReport]) -> pd.DataFrame:
    """Mean/min/max test AUC per (dataset, model variant) plus gain over the baseline mean."""
    df = reports_frame(reports)
    if df.empty:
        return pd.DataFrame(columns=["mean", "min", "max", "n", "gain"])
    g = df.groupby(["dataset_variant", "model_variant"])["auc"].agg(["mean", "min", "max", "count"])
    g = g.rename(columns={"count": "n"})
    base = g.xs("baseline", level="model_variant")["mean"] if "baseline" in g.index.get_level_values(1) else None
    if base is not None:
        g["gain"] = g["mean"] - base.reindex(g.index.get_level_values(0)).to_numpy()
    else:
        g["gain"] = np.nan
    return g


def markdown_table(reports: list[EvalReport], dataset_variant: str | None = None) -> str:
    """One table per dataset variant, rows shaped like "Model | AUC (gain)"."""
    summary = summarize(reports)
    out = []
    datasets = [dataset_variant] if dataset_variant else sorted(set(summary.index.get_level_values(0)))
    for ds in datasets:
        out.append(f"Test AUC on {ds}\n")
        out.append("| Model | AUC (mean over seeds) | min | max |")
        out.append("|---|---|---|---|")
        part = summary.loc[ds]
        for variant in ("baseline", "both", "user_only", "item_only"):
            if variant not in part.index:
                continue
            row = part.loc[variant]
            cell = f"{row['mean']:.4f}"
            if variant != "baseline" and np.isfinite(row["gain"]):
                cell += f" ({row['gain']:+.4f})"
            out.append(f"| {VARIANT_LABELS[variant]} | {cell} | {row['min']:.4f} | {row['max']:.4f} |")
        out.append("")
    return "\n".join(out)


def run_ablation(prepared, neighbor_table, seeds, config, dataset_variant: str = "",
                 variants=tuple(MODEL_VARIANTS), dataset_fingerprint: str = "", on_report=None) -> list[EvalReport]:
    """Train and test every model variant for every seed on one fixed dataset.

    All runs share the same instances, splits and neighbor table; seeds only
    change initialization, shuffling and dropout, and the same seed gives every
    variant the same instance stream.
    """
    from neighborrank.trainer import train

    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    splits = prepared.splits
    reports = []
    for seed in seeds:
        for variant in variants:
            cfg = config.replace(seed=seed, enhancement_mode=MODEL_VARIANTS[variant])
            result = train(prepared.log, splits, neighbor_table if variant != "baseline" else None, cfg)
            rep = evaluate(
                result.model, result.params, splits.test, result.history,
                dataset_variant=dataset_variant, model_variant=variant, seed=seed,
                n_train=len(splits.train), n_valid=len(splits.valid),
                config_fingerprint=cfg.fingerprint(), dataset_fingerprint=dataset_fingerprint,
            )
            rep.best_epoch = result.best_epoch
            reports.append(rep)
            if on_report is not None:
                on_report(rep)
    return reports
