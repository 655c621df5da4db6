"""Offline trajectory autoencoder whose bottleneck feeds the clustering stage."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .cluster import kmeans, prototypes_and_densities
from .numeric import DTYPE, NumericError
from .pcl import protonce, unit
from .trajdata import ConfigError, DatasetSplit, TrajectorySample


@dataclass
class ExtractorConfig:
    embed_dim: int = 128
    conv_channels: int = 16
    kernel_size: int = 3
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    cosine_lr: bool = True  # anneal to zero over the run
    grad_clip: float = 1.0
    pcl_aux_weight: float = 0.1
    aux_levels: tuple[int, ...] = (20, 50, 100)
    tau: float = 0.1
    alpha: float = 10.0
    future_enhanced: bool = True

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ConfigError("embed_dim", "must be >= 2")


class TrajectoryAutoencoder(nn.Module):
    def __init__(self, cfg: ExtractorConfig, T: int):
        super().__init__()
        self.cfg = cfg
        self.T = T
        self.conv = nn.Conv1d(2, cfg.conv_channels, cfg.kernel_size, padding=cfg.kernel_size // 2, dtype=DTYPE)
        self.enc = nn.LSTM(cfg.conv_channels, cfg.embed_dim, batch_first=True, dtype=DTYPE)
        self.dec = nn.LSTM(cfg.embed_dim, cfg.embed_dim, batch_first=True, dtype=DTYPE)
        self.out = nn.Linear(cfg.embed_dim, 2, dtype=DTYPE)

    def embed(self, traj: torch.Tensor) -> torch.Tensor:
        """traj (B, T, 2) positions -> (B, embed_dim) final encoder hidden state."""
        disp = traj[:, 1:] - traj[:, :-1]
        c = torch.tanh(self.conv(disp.transpose(1, 2))).transpose(1, 2)
        _, (h, _) = self.enc(c)
        return h[-1]

    def reconstruct(self, e: torch.Tensor, T: int | None = None) -> torch.Tensor:
        T = T or self.T
        inp = e.unsqueeze(1).expand(-1, T, -1)
        hs, _ = self.dec(inp, (e.unsqueeze(0).contiguous(), torch.zeros_like(e).unsqueeze(0)))
        return self.out(hs)

    def forward(self, traj):
        e = self.embed(traj)
        return self.reconstruct(e, traj.shape[1]), e


def trajectories(samples: list[TrajectorySample], future_enhanced: bool = True) -> torch.Tensor:
    arr = np.stack([s.full if future_enhanced else s.obs for s in samples])
    return torch.as_tensor(arr, dtype=DTYPE)


def extract(model: TrajectoryAutoencoder, samples, future_enhanced: bool = True,
            batch_size: int = 1024) -> np.ndarray:
    """Embeddings (n, embed_dim) for a sample or list of samples."""
    if isinstance(samples, TrajectorySample):
        samples = [samples]
    x = trajectories(samples, future_enhanced)
    if not torch.isfinite(x).all():
        raise NumericError("non-finite trajectory input")
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model.embed(x[i:i + batch_size]))
    return torch.cat(out).numpy()


def reconstruct(model: TrajectoryAutoencoder, embedding, T: int) -> np.ndarray:
    e = torch.as_tensor(np.asarray(embedding), dtype=DTYPE)
    single = e.dim() == 1
    with torch.no_grad():
        out = model.reconstruct(e.reshape(-1, e.shape[-1]), T).numpy()
    return out[0] if single else out


def _aux_targets(feats: np.ndarray, levels, alpha: float, seed: int):
    """Cluster unit embeddings per level; returns assignments (n, M), prototypes, densities."""
    assign, protos, dens = [], [], []
    for k in levels:
        res = kmeans(feats, k, seed=seed * 1000 + k, max_iters=50, restarts=1)
        c, phi = prototypes_and_densities(feats, res.assignments, k, alpha)
        assign.append(res.assignments)
        protos.append(c)
        dens.append(phi)
    return np.stack(assign, 1), protos, dens


def train_extractor(split: DatasetSplit, cfg: ExtractorConfig, seed: int = 0,
                    log=None) -> tuple[TrajectoryAutoencoder, list[dict]]:
    """Autoencoder training with reconstruction MSE plus auxiliary ProtoNCE.

    Pseudo labels for the auxiliary term are recomputed by k-means on the unit
    embeddings at the start of every epoch.
    """
    samples = split.train
    if not samples:
        raise ConfigError("train", "empty training split")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    x = trajectories(samples, cfg.future_enhanced)
    n, T = x.shape[0], x.shape[1]
    model = TrajectoryAutoencoder(cfg, T)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    bs = min(cfg.batch_size, n)
    steps = cfg.epochs * -(-n // bs)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps) if cfg.cosine_lr else None
    cap = max(2, n // 5)
    levels = tuple(min(k, cap) for k in cfg.aux_levels) if n >= 4 else ()
    history = []
    for epoch in range(cfg.epochs):
        use_aux = cfg.pcl_aux_weight > 0 and levels
        if use_aux:
            with torch.no_grad():
                feats = unit(model.embed(x)).numpy()
            assign, protos, dens = _aux_targets(feats, levels, cfg.alpha, seed + epoch)
            assign_t = torch.as_tensor(assign)
        order = rng.permutation(n)
        rec_sum, aux_sum = 0.0, 0.0
        for start in range(0, n, bs):
            idx = torch.as_tensor(order[start:start + bs])
            xb = x[idx]
            recon, e = model(xb)
            rec = ((recon - xb) ** 2).sum(-1).mean()
            loss = rec
            if use_aux and len(idx) >= 2:
                aux = protonce(unit(e), assign_t[idx], protos, dens, cfg.tau) / len(idx)
                loss = loss + cfg.pcl_aux_weight * aux
                aux_sum += aux.item() * len(idx)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite extractor loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            if sched:
                sched.step()
            rec_sum += rec.item() * len(idx)
        rec_mean = rec_sum / n
        rec_err = reconstruction_error(model, x)
        rec_item = {"epoch": epoch, "recon_loss": rec_mean, "aux_loss": aux_sum / n,
                    "recon_error": rec_err}
        history.append(rec_item)
        if log:
            log(rec_item)
    return model, history


def reconstruction_error(model: TrajectoryAutoencoder, x: torch.Tensor) -> float:
    """Mean per-point Euclidean reconstruction error in meters."""
    with torch.no_grad():
        recon, _ = model(x)
        return float(torch.sqrt(((recon - x) ** 2).sum(-1)).mean())


def write_embeddings_csv(path: str | Path, sample_ids, feats: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id"] + [f"f{j}" for j in range(feats.shape[1])])
        for sid, row in zip(sample_ids, feats):
            w.writerow([int(sid)] + [repr(float(v)) for v in row])
