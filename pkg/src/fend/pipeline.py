"""Checkpointed pipeline: extractor -> clustering -> baseline and FEND training -> reports."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .cluster import ClusterConfig, ClusterModel, build_hierarchy
from .evaluation import (BUCKETS, bucket_by_baseline, fde_cdf, separation_stats, write_cdf, write_table_csv)
from .extractor import ExtractorConfig, TrajectoryAutoencoder, extract, train_extractor
from .kalman import KalmanConfig, kalman_scores, write_scores_csv
from .pcl import PCLConfig
from .predictor import Predictor, PredictorConfig
from .trajdata import ConfigError, DatasetSplit, load_split
from .training import TrainConfig, evaluate_split, train_fend

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class StaleCheckpointError(RuntimeError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


@dataclass
class RunConfig:
    dataset: str = ""
    out_dir: str = "runs"
    seed: int | None = None
    ablate: tuple[str, ...] = ()
    n_bins: int = 50
    export_predictions: bool = False
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    kalman: KalmanConfig = field(default_factory=KalmanConfig)

    def validate(self, check_paths: bool = True) -> None:
        if self.seed is None:
            raise ConfigError("seed", "a seed is mandatory")
        bad = set(self.ablate) - ABLATIONS.keys()
        if bad:
            raise ConfigError("ablate", f"unknown ablation(s) {sorted(bad)}; choose from {sorted(ABLATIONS)}")
        if check_paths and not Path(self.dataset).is_file():
            raise ConfigError("dataset", f"file not found: {self.dataset}")
        if self.n_bins < 2:
            raise ConfigError("n_bins", "must be >= 2")

    def digest(self) -> str:
        return _hash(_jsonable(self))[:12]


ABLATIONS = {"no-pcl": "use_pcl", "no-hyper": "use_hyper", "no-future": "future_enhanced"}


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _build(cls, data: dict, prefix: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in data.items():
        if key not in names:
            raise ConfigError(f"{prefix}{key}", "unknown setting")
        f = names[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            if not isinstance(val, dict):
                raise ConfigError(f"{prefix}{key}", "expected a table")
            val = _build(type(default), val, f"{prefix}{key}.")
        elif isinstance(default, tuple):
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(prefix.rstrip(".") or cls.__name__, str(e)) from None


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"{path}: {e}") from None
    else:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError("config", f"{path}: {e}") from None
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict:
    return _jsonable(cfg)


def variant_flags(cfg: RunConfig) -> dict:
    flags = {"use_pcl": cfg.train.use_pcl, "use_hyper": cfg.train.use_hyper,
             "future_enhanced": cfg.train.future_enhanced}
    for a in cfg.ablate:
        flags[ABLATIONS[a]] = False
    return flags


# --- checkpoints ---

def save_checkpoint(path: Path, kind: str, key: str, config: dict, model: torch.nn.Module, extra=None) -> None:
    torch.save({"format": "fend-checkpoint", "version": CHECKPOINT_VERSION, "kind": kind, "key": key,
                "config": config, "state_dict": model.state_dict(), "extra": extra or {}}, path)


def load_checkpoint(path: Path) -> dict:
    ck = torch.load(path, weights_only=False)
    if ck.get("format") != "fend-checkpoint" or ck.get("version") != CHECKPOINT_VERSION:
        raise ConfigError("checkpoint", f"{path}: unsupported checkpoint format")
    return ck


def _check_key(path: Path, key: str, force: bool) -> bool:
    """True when an up-to-date artifact exists; raises on a stale one unless forced."""
    marker = path.with_name(path.name + ".key")
    if not path.exists() or not marker.exists():
        return False
    if marker.read_text() == key:
        return True
    if force:
        return False
    raise StaleCheckpointError(f"{path} was produced by a different configuration; rerun with --force")


def _mark(path: Path, key: str) -> None:
    path.with_name(path.name + ".key").write_text(key)


# --- stages ---

class Pipeline:
    def __init__(self, cfg: RunConfig, run_dir: str | Path | None = None, force: bool = False,
                 split: DatasetSplit | None = None):
        cfg.validate(check_paths=split is None)
        self.cfg = cfg
        self.force = force
        self.run_dir = Path(run_dir) if run_dir else Path(cfg.out_dir) / f"run-{cfg.digest()}"
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self._split = split
        cfg_file = self.run_dir / "config.json"
        doc = json.dumps(config_to_dict(cfg), indent=1, sort_keys=True)
        if cfg_file.exists() and cfg_file.read_text() != doc and not force:
            raise StaleCheckpointError(f"{self.run_dir} holds a run with a different configuration; "
                                       "use --force to overwrite")
        cfg_file.write_text(doc)

    @property
    def split(self) -> DatasetSplit:
        if self._split is None:
            self._split = load_split(self.cfg.dataset)
        return self._split

    def _data_key(self) -> str:
        if self.cfg.dataset and Path(self.cfg.dataset).is_file():
            return hashlib.sha256(Path(self.cfg.dataset).read_bytes()).hexdigest()
        return _hash([s.sample_id for s in self.split.train])

    def _stage(self, name, fn):
        try:
            return fn()
        except (StaleCheckpointError, ConfigError):
            raise
        except Exception as e:
            raise StageError(name, e) from e

    def extractor(self, future_enhanced: bool = True) -> TrajectoryAutoencoder:
        ecfg = dataclasses.replace(self.cfg.extractor, future_enhanced=future_enhanced)
        key = _hash([self._data_key(), _jsonable(ecfg), self.cfg.seed])
        path = self.run_dir / ("extractor.pt" if future_enhanced else "extractor_history.pt")

        def run():
            T = self.split.T_obs + (self.split.T_pred if future_enhanced else 0)
            if _check_key(path, key, self.force):
                model = TrajectoryAutoencoder(ecfg, T)
                model.load_state_dict(load_checkpoint(path)["state_dict"])
                return model
            log.info("training extractor (future_enhanced=%s)", future_enhanced)
            model, hist = train_extractor(self.split, ecfg, seed=self.cfg.seed)
            save_checkpoint(path, "extractor", key, _jsonable(ecfg), model, {"history": hist})
            _mark(path, key)
            return model

        model = self._stage("extractor", run)
        return model, key

    def clusters(self, future_enhanced: bool = True) -> ClusterModel:
        model, ekey = self.extractor(future_enhanced)
        key = _hash([ekey, _jsonable(self.cfg.cluster)])
        path = self.run_dir / ("clusters.json" if future_enhanced else "clusters_history.json")

        def run():
            if _check_key(path, key, self.force):
                return ClusterModel.from_json(path.read_text())
            emb = extract(model, self.split.train, future_enhanced)
            emb = emb / np.sqrt((emb * emb).sum(1, keepdims=True) + 1e-12)
            cm = build_hierarchy(emb, self.cfg.cluster, seed=self.cfg.seed,
                                 sample_ids=[s.sample_id for s in self.split.train])
            path.write_text(cm.to_json())
            cm.write_assignments_csv(path.with_suffix(".csv"))
            _mark(path, key)
            return cm

        return self._stage("cluster", run), key

    def train_variant(self, name: str, use_pcl: bool, use_hyper: bool, future_enhanced: bool = True):
        tcfg = dataclasses.replace(self.cfg.train, use_pcl=use_pcl, use_hyper=use_hyper,
                                   future_enhanced=future_enhanced, seed=self.cfg.seed)
        pcfg = dataclasses.replace(self.cfg.predictor, T_pred=self.split.T_pred, use_hyper=use_hyper)
        ckey = None
        cm = None
        if use_pcl:
            cm, ckey = self.clusters(future_enhanced)
        key = _hash([self._data_key(), ckey, _jsonable(tcfg), _jsonable(pcfg)])
        path = self.run_dir / f"{name}.pt"

        def run():
            if _check_key(path, key, self.force):
                ck = load_checkpoint(path)
                model = Predictor(pcfg)
                model.load_state_dict(ck["state_dict"])
                return model
            log.info("training %s (pcl=%s hyper=%s future=%s)", name, use_pcl, use_hyper, future_enhanced)
            with open(self.run_dir / f"{name}_log.jsonl", "w") as fh:
                res = train_fend(self.split, cm, tcfg, pcfg,
                                 log_fn=lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n"))
            save_checkpoint(path, "predictor", key, {"train": _jsonable(tcfg), "predictor": _jsonable(pcfg)},
                            res.model, {"gate_active": res.gate.active.tolist()})
            _mark(path, key)
            return res.model

        return self._stage(f"train-{name}", run)

    def run(self) -> dict:
        """Baseline (no PCL, no hyper) first, then the configured FEND variant, then reports."""
        self.train_variant("baseline", False, False)
        f = variant_flags(self.cfg)
        self.train_variant("fend", f["use_pcl"], f["use_hyper"], f["future_enhanced"])
        return self.evaluate()

    def load_model(self, name: str) -> Predictor:
        path = self.run_dir / f"{name}.pt"
        if not path.exists():
            raise FileNotFoundError(str(path))
        ck = load_checkpoint(path)
        pcfg = _build(PredictorConfig, ck["config"]["predictor"], "predictor.")
        model = Predictor(pcfg)
        model.load_state_dict(ck["state_dict"])
        return model

    def evaluate(self) -> dict:
        return self._stage("eval", self._evaluate)

    def _evaluate(self) -> dict:
        split = self.split
        out = self.run_dir / "reports"
        out.mkdir(exist_ok=True)
        models = {name: self.load_model(name) for name in ("baseline", "fend")}
        results = {name: evaluate_split(m, split.test) for name, m in models.items()}
        base_fde = results["baseline"]["fde"]
        reports = {name: bucket_by_baseline(base_fde, r["ade"], r["fde"]) for name, r in results.items()}
        write_table_csv(out / "table.csv", reports)

        kcfg = dataclasses.replace(self.cfg.kalman, dt=split.dt)
        kscores = kalman_scores(split.test, kcfg, split.T_pred)
        write_scores_csv(out / "kalman_scores.csv", [s.sample_id for s in split.test], kscores)
        kreports = {name: bucket_by_baseline(kscores, r["ade"], r["fde"]) for name, r in results.items()}
        write_table_csv(out / "table_kalman.csv", kreports)

        with open(out / "table_diff.csv", "w") as fh:
            fh.write("bucket,baseline_minADE,fend_minADE,baseline_minFDE,fend_minFDE,delta_minFDE\n")
            for b in BUCKETS:
                rb, rf = reports["baseline"], reports["fend"]
                fh.write(f"{b},{rb.minade[b]:.4f},{rf.minade[b]:.4f},{rb.minfde[b]:.4f},{rf.minfde[b]:.4f},"
                         f"{rf.minfde[b] - rb.minfde[b]:+.4f}\n")

        for name, r in results.items():
            write_cdf(out / f"cdf_{name}.txt", fde_cdf(r["fde"], self.cfg.n_bins))
            (out / f"buckets_{name}.json").write_text(json.dumps(reports[name].to_dict(), indent=1))

        sep = self._separation(models)
        (out / "separation.json").write_text(json.dumps(sep, indent=1, sort_keys=True))
        if self.cfg.export_predictions:
            preds = {str(s.sample_id): results["fend"]["pred"][i].round(6).tolist()
                     for i, s in enumerate(split.test)}
            (out / "predictions.json").write_text(json.dumps(preds))
        return {"reports": reports, "kalman_reports": kreports, "separation": sep, "out": out}

    def _separation(self, models) -> dict:
        cm_path = self.run_dir / "clusters.json"
        if not cm_path.exists():
            return {}
        cm = ClusterModel.from_json(cm_path.read_text())
        labels = cm.levels[-1].assignments
        train = self.split.train
        idx_of = {int(s): i for i, s in enumerate(cm.sample_ids)}
        order = [idx_of[s.sample_id] for s in train]
        labels = labels[order]
        obs = torch.as_tensor(np.stack([s.obs for s in train]))
        tail = np.array([(s.pattern_label or 0) > 0 for s in train])
        out = {}
        for name, model in models.items():
            with torch.no_grad():
                proj = model.encode(obs)[1].numpy()
            entry = {"all": json.loads(separation_stats(proj, labels).to_json())}
            if tail.any() and len(np.unique(labels[tail])) >= 2:
                entry["tail"] = json.loads(separation_stats(proj[tail], labels[tail]).to_json())
            out[name] = entry
        return out
