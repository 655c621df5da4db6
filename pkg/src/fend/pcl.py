"""ProtoNCE over projected encoder features with fixed pseudo labels and a momentum bank."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .cluster import prototypes_and_densities
from .numeric import DTYPE

PROJ_EPS = 1e-12


class ContractError(ValueError):
    pass


@dataclass
class PCLConfig:
    tau: float = 0.1
    momentum_beta: float = 0.9
    refresh_every: int = 1
    alpha: float = 10.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.momentum_beta < 1.0:
            raise ValueError("momentum_beta must lie in [0, 1)")


def unit(x: torch.Tensor) -> torch.Tensor:
    # eps keeps the zero vector finite
    return x / torch.sqrt((x * x).sum(-1, keepdim=True) + PROJ_EPS)


class Projection(nn.Module):
    """Affine layer followed by L2 normalization."""

    def __init__(self, d_in: int, d_out: int = 64):
        super().__init__()
        self.fc = nn.Linear(d_in, d_out, dtype=DTYPE)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return unit(self.fc(v))


def _active(active, r: int, like: torch.Tensor) -> torch.Tensor:
    if active is None:
        return torch.ones(r, dtype=torch.bool, device=like.device)
    return torch.as_tensor(active, dtype=torch.bool, device=like.device)


def loss_instance(feats: torch.Tensor, cluster_ids, tau: float = 0.1, active=None) -> torch.Tensor:
    """Instance-wise term, summed over anchors.

    Positives share the anchor's cluster id (finest level), exclude the anchor,
    and must themselves be active. The softmax denominator runs over the whole
    batch including the anchor. Inactive anchors and anchors with no positive
    contribute zero.
    """
    r = feats.shape[0]
    if r < 2:
        raise ContractError("loss_instance needs a batch of at least 2")
    ids = torch.as_tensor(cluster_ids, device=feats.device)
    act = _active(active, r, feats)
    logits = feats @ feats.T / tau
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    eye = torch.eye(r, dtype=torch.bool, device=feats.device)
    pos = (ids[:, None] == ids[None, :]) & ~eye & act[None, :]
    n_pos = pos.sum(1)
    summed = torch.where(pos, log_prob, torch.zeros_like(log_prob)).sum(1)
    keep = act & (n_pos > 0)
    per = torch.where(keep, -summed / n_pos.clamp(min=1), torch.zeros_like(summed))
    return per.sum()


def loss_proto(feats: torch.Tensor, assignments, prototypes, densities, active=None) -> torch.Tensor:
    """Instance-prototype term averaged over levels and summed over active anchors.

    ``assignments`` is (r, M); ``prototypes[m]`` is (N_m, D), ``densities[m]`` (N_m,).
    """
    M = len(prototypes)
    r = feats.shape[0]
    if M == 0:
        return feats.sum() * 0.0
    a = torch.as_tensor(assignments, device=feats.device)
    if a.dim() == 1:
        a = a[:, None]
    if a.shape != (r, M):
        raise ContractError(f"assignments shape {tuple(a.shape)} != ({r}, {M})")
    if (a < 0).any():
        raise ContractError("missing cluster assignment")
    act = _active(active, r, feats)
    total = feats.new_zeros(r)
    for m in range(M):
        c = torch.as_tensor(prototypes[m], dtype=feats.dtype, device=feats.device)
        phi = torch.as_tensor(densities[m], dtype=feats.dtype, device=feats.device)
        logits = (feats @ c.T) / phi[None, :]
        lp = logits - torch.logsumexp(logits, dim=1, keepdim=True)
        total = total + lp.gather(1, a[:, m:m + 1]).squeeze(1)
    total = torch.where(act, total, torch.zeros_like(total))
    return -total.sum() / M


def protonce(feats: torch.Tensor, assignments, prototypes, densities, tau: float = 0.1,
             active=None) -> torch.Tensor:
    """Instance term (on the finest level) plus prototype term. Degenerate inputs give 0."""
    a = torch.as_tensor(assignments)
    if a.dim() == 1:
        a = a[:, None]
    ins = loss_instance(feats, a[:, -1], tau, active) if feats.shape[0] >= 2 else feats.sum() * 0.0
    return ins + loss_proto(feats, a, prototypes, densities, active)


class FeatureBank:
    """Momentum features per training sample plus per-level prototypes/densities."""

    def __init__(self, sample_ids, feats: np.ndarray, assignments: np.ndarray, level_sizes,
                 cfg: PCLConfig = PCLConfig()):
        self.sample_ids = np.asarray(sample_ids, dtype=np.int64)
        self.index = {int(s): i for i, s in enumerate(self.sample_ids)}
        f = np.asarray(feats, dtype=np.float64)
        self.feats = f / np.sqrt((f * f).sum(1, keepdims=True) + PROJ_EPS)
        self.assignments = np.asarray(assignments, dtype=np.int64).reshape(len(self.sample_ids), -1)
        self.level_sizes = list(level_sizes)
        self.cfg = cfg
        self.prototypes: list[np.ndarray] = []
        self.densities: list[np.ndarray] = []
        self.refresh()

    def rows(self, sample_ids) -> np.ndarray:
        try:
            return np.array([self.index[int(s)] for s in sample_ids], dtype=np.int64)
        except KeyError as e:
            raise ContractError(f"sample id {e.args[0]} not in feature bank") from None

    def update(self, sample_ids, new_feats) -> None:
        idx = self.rows(sample_ids)
        if isinstance(new_feats, torch.Tensor):
            new_feats = new_feats.detach().cpu().numpy()
        b = self.cfg.momentum_beta
        mixed = b * self.feats[idx] + (1.0 - b) * np.asarray(new_feats, dtype=np.float64)
        self.feats[idx] = mixed / np.sqrt((mixed * mixed).sum(1, keepdims=True) + PROJ_EPS)

    def refresh(self) -> None:
        self.prototypes, self.densities = [], []
        for m, k in enumerate(self.level_sizes):
            c, phi = prototypes_and_densities(self.feats, self.assignments[:, m], k, self.cfg.alpha)
            self.prototypes.append(c)
            self.densities.append(phi)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id"] + [f"f{j}" for j in range(self.feats.shape[1])])
            for sid, row in zip(self.sample_ids, self.feats):
                w.writerow([int(sid)] + [repr(float(v)) for v in row])


def bank_update(bank: FeatureBank, sample_ids, new_feats) -> FeatureBank:
    bank.update(sample_ids, new_feats)
    return bank
