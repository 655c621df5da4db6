"""Training schedule: warm-up, hardness gate, gated ProtoNCE + EWTA, winner-count evolution."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .cluster import ClusterModel
from .evaluation import batch_min_ade_fde, bucket_by_baseline
from .kalman import KalmanConfig, kalman_scores
from .numeric import DTYPE, NumericError
from .pcl import FeatureBank, PCLConfig, protonce
from .predictor import Predictor, PredictorConfig, ewta_k, ewta_per_sample
from .trajdata import ConfigError, DatasetSplit, TrajectorySample, denormalize, stack


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 256
    lr: float = 0.01
    lr_decay: float = 0.001  # per optimizer step: lr *= (1 - lr_decay)
    grad_clip: float = 1.0
    warmup_epochs: int = 30
    stage_epochs: int | None = None
    a_initial: float = 50.0
    a_late: float = 0.2
    a_switch_epoch: int = 10  # counted from the end of warm-up
    a_switch_mode: str = "epoch"  # or "loss": drop to a_late once EWTA rises above its warm-up-end value
    theta: float = 0.2
    seed: int = 0
    use_pcl: bool = True
    use_hyper: bool = True
    future_enhanced: bool = True
    val_every: int = 1
    pcl: PCLConfig = field(default_factory=PCLConfig)

    def validate(self, K: int) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs", f"must lie in [0, epochs={self.epochs})")
        if self.theta < 0:
            raise ConfigError("theta", "must be >= 0")
        if self.a_initial < 0 or self.a_late < 0:
            raise ConfigError("a_initial" if self.a_initial < 0 else "a_late", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if not 0 <= self.lr_decay < 1:
            raise ConfigError("lr_decay", "must lie in [0, 1)")
        if self.a_switch_mode not in ("epoch", "loss"):
            raise ConfigError("a_switch_mode", "must be 'epoch' or 'loss'")
        if self.stage_epochs is not None and self.stage_epochs < 1:
            raise ConfigError("stage_epochs", "must be >= 1")

    def stages(self, K: int) -> int:
        if self.stage_epochs is not None:
            return self.stage_epochs
        n_stages = math.ceil(math.log2(K)) + 1 if K > 1 else 1
        return max(1, math.ceil(self.epochs / n_stages))


def pcl_weight(pcl_epoch: int, cfg: TrainConfig, switched: bool = False) -> float:
    """a as a function of epochs elapsed since the end of warm-up.

    In "loss" mode the step happens when ``switched`` is raised instead.
    """
    if cfg.a_switch_mode == "loss":
        return cfg.a_late if switched else cfg.a_initial
    return cfg.a_initial if pcl_epoch < cfg.a_switch_epoch else cfg.a_late


@dataclass
class GateMask:
    sample_ids: np.ndarray
    active: np.ndarray  # bool per sample
    scores: np.ndarray  # the frozen warm-up prediction loss

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=bool)
        self.active.setflags(write=False)

    def digest(self) -> str:
        return hashlib.sha256(self.active.tobytes()).hexdigest()[:16]

    def fraction(self, where=None) -> float:
        a = self.active if where is None else self.active[where]
        return float(a.mean()) if len(a) else float("nan")


def _tensors(samples: list[TrajectorySample]):
    obs, fut = stack(samples)
    return torch.as_tensor(obs, dtype=DTYPE), torch.as_tensor(fut, dtype=DTYPE)


def predict(model: Predictor, obs: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for i in range(0, len(obs), batch_size):
            out.append(model(obs[i:i + batch_size])[0])
    return torch.cat(out)


def per_sample_ewta(model: Predictor, obs, fut, k: int, batch_size: int = 1024) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(obs), batch_size):
            pred = model(obs[i:i + batch_size])[0]
            out.append(ewta_per_sample(pred, fut[i:i + batch_size], k))
    return torch.cat(out).numpy()


def compute_gate(model: Predictor, samples: list[TrajectorySample], k_winners: int, theta: float,
                 obs=None, fut=None) -> GateMask:
    """Active iff the sample's current EWTA loss exceeds theta."""
    if obs is None:
        obs, fut = _tensors(samples)
    scores = per_sample_ewta(model, obs, fut, k_winners)
    return GateMask(np.array([s.sample_id for s in samples]), scores > theta, scores)


def total_loss(pred, fut, proj, k_winners: int, *, assignments=None, bank: FeatureBank | None = None,
               active=None, a: float = 0.0, tau: float = 0.1, use_pcl: bool = True):
    """Per-sample reweighted loss: mean over the batch of (EWTA_i + lambda_i * ProtoNCE_i).

    Returns (total, ewta, pcl) with pcl the unweighted gated ProtoNCE sum divided by batch size.
    """
    ewta = ewta_per_sample(pred, fut, k_winners).mean()
    if not use_pcl or bank is None or active is None or a == 0.0 or not np.any(active):
        zero = ewta.new_zeros(())
        return ewta, ewta, zero
    pcl = protonce(proj, assignments, bank.prototypes, bank.densities, tau, active) / pred.shape[0]
    return ewta + a * pcl, ewta, pcl


@dataclass
class TrainResult:
    model: Predictor
    log: list[dict]
    gate: GateMask | None
    bank: FeatureBank | None


def _assignments_for(samples, clusters: ClusterModel | None) -> np.ndarray | None:
    if clusters is None:
        return None
    lm = clusters.label_map()
    try:
        return np.stack([lm[s.sample_id] for s in samples])
    except KeyError as e:
        raise ConfigError("clusters", f"no cluster assignment for training sample {e.args[0]}") from None


def evaluate_split(model: Predictor, samples: list[TrajectorySample], baseline_scores=None) -> dict:
    """Raw-coordinate minADE/minFDE per sample, plus buckets when a ranking is supplied."""
    obs, fut = _tensors(samples)
    pred = predict(model, obs).numpy()
    raw_pred = np.stack([denormalize(s, p) for s, p in zip(samples, pred)])
    raw_fut = np.stack([denormalize(s, s.fut) for s in samples])
    ade, fde = batch_min_ade_fde(raw_pred, raw_fut)
    out = {"ade": ade, "fde": fde, "pred": raw_pred}
    if baseline_scores is not None:
        out["report"] = bucket_by_baseline(baseline_scores, ade, fde)
    return out


def train_fend(split: DatasetSplit, clusters: ClusterModel | None, cfg: TrainConfig,
               pcfg: PredictorConfig | None = None, log_fn=None, val_scores=None,
               on_epoch=None) -> TrainResult:
    """Warm-up on EWTA alone, freeze the gate, then add the gated ProtoNCE term.

    ``clusters`` supplies pseudo labels for the training samples; it may be None
    only when ``cfg.use_pcl`` is False. ``val_scores`` ranks test samples for the
    bucketed validation entries (Kalman FDE when omitted).
    """
    pcfg = pcfg or PredictorConfig(T_pred=split.T_pred)
    pcfg.use_hyper = cfg.use_hyper
    cfg.validate(pcfg.K)
    if pcfg.T_pred != split.T_pred:
        raise ConfigError("T_pred", f"predictor horizon {pcfg.T_pred} != dataset {split.T_pred}")
    if cfg.use_pcl and clusters is None:
        raise ConfigError("clusters", "use_pcl requires a cluster model")
    samples = split.train
    if not samples:
        raise ConfigError("train", "empty training split")
    assignments = _assignments_for(samples, clusters) if cfg.use_pcl else None

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = Predictor(pcfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=1.0 - cfg.lr_decay)

    obs, fut = _tensors(samples)
    ids = np.array([s.sample_id for s in samples])
    n = len(samples)
    bs = min(cfg.batch_size, n)
    stage = cfg.stages(pcfg.K)

    if val_scores is None and cfg.val_every and split.test:
        val_scores = kalman_scores(split.test, KalmanConfig(dt=split.dt), split.T_pred)

    gate: GateMask | None = None
    bank: FeatureBank | None = None
    log = []
    switched, ewta_ref = False, None
    for epoch in range(cfg.epochs):
        k = ewta_k(epoch, pcfg.K, stage)
        post = epoch >= cfg.warmup_epochs
        if post and gate is None:
            k_gate = ewta_k(epoch - 1, pcfg.K, stage) if epoch > 0 else k
            gate = compute_gate(model, samples, k_gate, cfg.theta, obs, fut)
            if cfg.use_pcl:
                with torch.no_grad():
                    proj = torch.cat([model.encode(obs[i:i + 1024])[1] for i in range(0, n, 1024)])
                bank = FeatureBank(ids, proj.numpy(), assignments,
                                   [lv.k for lv in clusters.levels], cfg.pcl)
        pcl_epoch = epoch - cfg.warmup_epochs
        if post and ewta_ref is None:
            ewta_ref = log[-1]["ewta_loss"] if log else math.inf
        a = pcl_weight(pcl_epoch, cfg, switched) if post and cfg.use_pcl else 0.0
        if bank is not None and pcl_epoch > 0 and pcl_epoch % cfg.pcl.refresh_every == 0:
            bank.refresh()

        order = rng.permutation(n)
        sums = {"loss": 0.0, "ewta": 0.0, "pcl": 0.0}
        for start in range(0, n, bs):
            bi = order[start:start + bs]
            idx = torch.as_tensor(bi)
            pred, proj, _ = model(obs[idx])
            act = gate.active[bi] if (gate is not None and cfg.use_pcl) else None
            loss, ewta, pcl = total_loss(pred, fut[idx], proj, k, assignments=None if assignments is None else
                                         assignments[bi], bank=bank, active=act, a=a, tau=cfg.pcl.tau,
                                         use_pcl=cfg.use_pcl and post)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch starting {start}: "
                                   f"ewta={ewta.item()} pcl={pcl.item()} a={a}")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            sched.step()
            if bank is not None:
                bank.update(ids[bi], proj.detach())
            w = len(bi)
            sums["loss"] += loss.item() * w
            sums["ewta"] += ewta.item() * w
            sums["pcl"] += pcl.item() * w

        rec = {
            "epoch": epoch,
            "loss": sums["loss"] / n,
            "ewta_loss": sums["ewta"] / n,
            "pcl_loss": sums["pcl"] / n,
            "a": a,
            "lr": opt.param_groups[0]["lr"],
            "k_winners": k,
            "warmup": not post,
            "gate_digest": gate.digest() if gate is not None else None,
        }
        last = epoch == cfg.epochs - 1
        if cfg.val_every and split.test and (last or (epoch + 1) % cfg.val_every == 0):
            ev = evaluate_split(model, split.test, val_scores)
            rec["val"] = ev["report"].to_dict()
        if post and rec["ewta_loss"] > ewta_ref:
            switched = True
        log.append(rec)
        if log_fn:
            log_fn(rec)
        if on_epoch:
            on_epoch(epoch, model)

    if gate is None:
        # warm-up covered every epoch; freeze on the final weights
        gate = compute_gate(model, samples, ewta_k(cfg.epochs - 1, pcfg.K, stage), cfg.theta, obs, fut)
    return TrainResult(model, log, gate, bank)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
