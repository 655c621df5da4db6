"""Multi-seed synthetic long-tail study: plain / PCL-only / hyper-only / full FEND.

Results are cached per (seed, variant) under a directory keyed by the settings
hash, so an interrupted study resumes where it stopped.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cluster import ClusterConfig, ClusterModel, build_hierarchy
from .evaluation import BUCKETS, bucket_by_baseline, separation_stats
from .extractor import ExtractorConfig, extract, train_extractor
from .kalman import KalmanConfig, kalman_scores
from .predictor import PredictorConfig
from .trajdata import HEAD, DatasetSplit, synth_longtail
from .training import TrainConfig, _assignments_for, evaluate_split, train_fend

log = logging.getLogger(__name__)

VARIANTS = {"plain": (False, False), "pcl": (True, False), "hyper": (False, True), "full": (True, True)}


@dataclass
class StudySettings:
    n: int = 10_000
    tail: float = 0.1
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(val_every=0))
    predictor: PredictorConfig = field(default_factory=PredictorConfig)

    def digest(self) -> str:
        d = dataclasses.asdict(self)
        d.pop("seeds")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def _unit(x):
    return x / np.sqrt((x * x).sum(1, keepdims=True) + 1e-12)


def _clusters(split: DatasetSplit, st: StudySettings, seed: int, path: Path) -> ClusterModel:
    if path.exists():
        return ClusterModel.from_json(path.read_text())
    model, _ = train_extractor(split, st.extractor, seed=seed)
    emb = _unit(extract(model, split.train, st.extractor.future_enhanced))
    cm = build_hierarchy(emb, st.cluster, seed=seed, sample_ids=[s.sample_id for s in split.train])
    path.write_text(cm.to_json())
    return cm


def _tail_silhouette(model, split: DatasetSplit, labels: np.ndarray) -> float:
    tail = np.array([s.pattern_label != HEAD for s in split.train])
    obs = torch.as_tensor(np.stack([s.obs for s in split.train]))
    with torch.no_grad():
        proj = model.encode(obs)[1].numpy()
    return separation_stats(proj[tail], labels[tail]).silhouette


def run_variant(split, cm, st: StudySettings, seed: int, name: str) -> dict:
    use_pcl, use_hyper = VARIANTS[name]
    tcfg = dataclasses.replace(st.train, use_pcl=use_pcl, use_hyper=use_hyper, seed=seed)
    pcfg = dataclasses.replace(st.predictor, T_pred=split.T_pred, use_hyper=use_hyper)
    t0 = time.time()
    res = train_fend(split, cm, tcfg, pcfg)
    ev = evaluate_split(res.model, split.test)
    labels = _assignments_for(split.train, cm)[:, -1]
    pattern = np.array([s.pattern_label for s in split.train])
    return {
        "ade": ev["ade"].tolist(),
        "fde": ev["fde"].tolist(),
        "tail_silhouette": _tail_silhouette(res.model, split, labels),
        "gate_tail": res.gate.fraction(pattern != HEAD),
        "gate_head": res.gate.fraction(pattern == HEAD),
        "final_ewta": res.log[-1]["ewta_loss"],
        "seconds": round(time.time() - t0, 1),
    }


def run_seed(st: StudySettings, seed: int, cache: Path, variants=tuple(VARIANTS)) -> dict:
    cache.mkdir(parents=True, exist_ok=True)
    split = synth_longtail(st.n, st.tail, seed=seed)
    out = {}
    cm = None
    for name in variants:
        path = cache / f"seed{seed}_{name}.json"
        if path.exists():
            out[name] = json.loads(path.read_text())
            continue
        if cm is None:
            cm = _clusters(split, st, seed, cache / f"seed{seed}_clusters.json")
        log.info("seed %d: training %s", seed, name)
        out[name] = run_variant(split, cm, st, seed, name)
        path.write_text(json.dumps(out[name]))
    kal = kalman_scores(split.test, KalmanConfig(dt=split.dt), split.T_pred)
    pattern = np.array([s.pattern_label for s in split.test])
    out["kalman"] = {"tail": float(kal[pattern != HEAD].mean()), "head": float(kal[pattern == HEAD].mean())}
    return out


def summarize(results: dict[int, dict]) -> dict:
    """Per-seed bucket tables ranked by the plain variant's test FDE."""
    summary = {}
    for seed, res in results.items():
        base = np.asarray(res["plain"]["fde"])
        row = {}
        for name in VARIANTS:
            if name not in res:
                continue
            rep = bucket_by_baseline(base, res[name]["ade"], res[name]["fde"])
            row[name] = {
                "buckets": {b: [rep.minade[b], rep.minfde[b]] for b in BUCKETS},
                "top5_fde": rep.minfde["top5"],
                "all_ade": rep.minade["all"],
                "tail_silhouette": res[name]["tail_silhouette"],
                "gate_tail": res[name]["gate_tail"],
                "gate_head": res[name]["gate_head"],
            }
        row["kalman"] = res["kalman"]
        summary[seed] = row
    return summary


def run_study(st: StudySettings, root: str | Path = "results/study") -> dict:
    cache = Path(root) / f"study-{st.digest()}"
    results = {seed: run_seed(st, seed, cache) for seed in st.seeds}
    summary = summarize(results)
    (cache / "summary.json").write_text(json.dumps({str(k): v for k, v in summary.items()}, indent=1))
    return summary
