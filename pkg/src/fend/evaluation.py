"""Displacement metrics, tail buckets ranked by a baseline score, FDE CDFs, embedding separation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import silhouette_score

from .pcl import ContractError

TOP_PERCENTS = (1, 2, 3, 4, 5)
BUCKETS = ("top1", "top2", "top3", "top4", "top5", "rest", "all")


def min_ade_fde(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """pred (K, T, 2), gt (T, 2); minima over heads taken independently per metric."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim != 3 or pred.shape[1:] != gt.shape:
        raise ContractError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    d = np.linalg.norm(pred - gt[None], axis=-1)
    return float(d.mean(1).min()), float(d[:, -1].min())


def batch_min_ade_fde(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """pred (n, K, T, 2), gt (n, T, 2) -> per-sample (minADE, minFDE)."""
    if pred.ndim != 4 or pred.shape[0] != gt.shape[0] or pred.shape[2:] != gt.shape[1:]:
        raise ContractError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    d = np.linalg.norm(pred - gt[:, None], axis=-1)
    return d.mean(2).min(1), d[:, :, -1].min(1)


def bucket_indices(baseline_scores: np.ndarray) -> dict[str, np.ndarray]:
    """Sample indices per bucket; top P% = the ceil(P n / 100) highest baseline scores."""
    s = np.asarray(baseline_scores, dtype=np.float64)
    n = len(s)
    # stable sort keeps ties in sample order
    order = np.argsort(-s, kind="stable")
    out = {}
    for p in TOP_PERCENTS:
        out[f"top{p}"] = order[: math.ceil(p * n / 100)]
    out["rest"] = order[len(out["top5"]):]
    out["all"] = np.arange(n)
    return out


@dataclass
class BucketReport:
    minade: dict[str, float]
    minfde: dict[str, float]
    counts: dict[str, int]
    indices: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def row(self) -> list[str]:
        return [f"{self.minade[b]:.2f}/{self.minfde[b]:.2f}" for b in BUCKETS]

    def to_dict(self) -> dict:
        return {b: {"minADE": self.minade[b], "minFDE": self.minfde[b], "n": self.counts[b]} for b in BUCKETS}


def bucket_by_baseline(baseline_scores, model_ade, model_fde, baseline_ids=None, model_ids=None) -> BucketReport:
    """Mean model minADE/minFDE over buckets ranked by the baseline's per-sample score."""
    baseline_scores = np.asarray(baseline_scores, dtype=np.float64)
    model_ade = np.asarray(model_ade, dtype=np.float64)
    model_fde = np.asarray(model_fde, dtype=np.float64)
    if not (len(baseline_scores) == len(model_ade) == len(model_fde)):
        raise ContractError("baseline and model cover different numbers of samples")
    if baseline_ids is not None and model_ids is not None and \
            not np.array_equal(np.asarray(baseline_ids), np.asarray(model_ids)):
        raise ContractError("baseline and model cover different sample ids")
    idx = bucket_indices(baseline_scores)
    return BucketReport(
        {b: float(model_ade[i].mean()) for b, i in idx.items()},
        {b: float(model_fde[i].mean()) for b, i in idx.items()},
        {b: int(len(i)) for b, i in idx.items()},
        idx,
    )


def write_table_csv(path: str | Path, reports: dict[str, BucketReport]) -> None:
    """Rows per model, cells 'ADE/FDE' across Top 1%..5%, Rest, All."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "Top 1%", "Top 2%", "Top 3%", "Top 4%", "Top 5%", "Rest", "All"])
        for name, rep in reports.items():
            w.writerow([name] + rep.row())


def fde_cdf(fdes, n_bins: int = 50) -> np.ndarray:
    """(n_bins, 2) table of (threshold, fraction of samples with FDE <= threshold)."""
    f = np.sort(np.asarray(fdes, dtype=np.float64))
    if len(f) == 0:
        raise ContractError("fde_cdf needs at least one sample")
    grid = np.linspace(0.0, f[-1], n_bins)
    frac = np.searchsorted(f, grid, side="right") / len(f)
    return np.stack([grid, frac], axis=1)


def write_cdf(path: str | Path, table: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("# fde cdf\n")
        for x, y in table:
            fh.write(f"{x:.6f} {y:.6f}\n")


@dataclass
class SeparationStats:
    intra: dict[int, float]
    inter: float
    ratio: float
    silhouette: float

    def to_json(self) -> str:
        ratio = "inf" if math.isinf(self.ratio) else self.ratio
        return json.dumps({"intra": {str(k): v for k, v in self.intra.items()}, "inter": self.inter,
                           "ratio": ratio, "silhouette": self.silhouette}, indent=1)


def separation_stats(features: np.ndarray, labels) -> SeparationStats:
    """Per-cluster mean distance to the prototype, mean inter-prototype distance, silhouette."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ContractError("separation_stats needs at least two labels")
    protos = np.stack([x[labels == u].mean(0) for u in uniq])
    intra = {int(u): float(np.linalg.norm(x[labels == u] - protos[j], axis=1).mean()) for j, u in enumerate(uniq)}
    pd = np.linalg.norm(protos[:, None] - protos[None], axis=-1)
    inter = float(pd[np.triu_indices(len(uniq), 1)].mean())
    mean_intra = float(np.mean(list(intra.values())))
    ratio = math.inf if mean_intra == 0 else inter / mean_intra
    if len(uniq) < len(x) and np.ptp(x, axis=0).max() > 0:
        sil = float(silhouette_score(x, labels))
    else:
        sil = 0.0
    return SeparationStats(intra, inter, ratio, sil)


def pca_2d(features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    xc = x - x.mean(0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    return xc @ vt[:2].T
