"""Trajectory predictor: LSTM encoder, projection head, hypernetwork-modulated LSTM decoder, K heads."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from .numeric import DTYPE, layer_norm
from .pcl import ContractError, Projection

GATES = ("i", "g", "f", "o")


@dataclass
class PredictorConfig:
    enc_hidden: int = 128
    dec_hidden: int = 128
    dec_input: int = 32
    hyper_hidden: int = 128
    z_dim: int = 16
    K: int = 20
    d_proj: int = 64
    T_pred: int = 12
    use_hyper: bool = True
    autoregressive: bool = False

    def __post_init__(self):
        for name in ("enc_hidden", "dec_hidden", "dec_input", "hyper_hidden", "z_dim", "K", "d_proj", "T_pred"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class HyperZ(NamedTuple):
    z_h: torch.Tensor  # (..., z_dim)
    z_x: torch.Tensor  # (..., z_dim)
    z_b: torch.Tensor  # (..., 4, z_dim), gate order i, g, f, o


class HyperNet(nn.Module):
    """Two-layer tanh MLP from the encoder feature to the six z vectors."""

    def __init__(self, d_in: int, hidden: int, z_dim: int):
        super().__init__()
        self.z_dim = z_dim
        self.fc1 = nn.Linear(d_in, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, 6 * z_dim, dtype=DTYPE)
        with torch.no_grad():
            # start near identity modulation: z_h, z_x ~ 1 and z_b ~ 0
            self.fc2.weight.mul_(0.1)
            self.fc2.bias.zero_()
            self.fc2.bias[: 2 * z_dim] = 1.0

    def forward(self, v: torch.Tensor) -> HyperZ:
        out = self.fc2(torch.tanh(self.fc1(v)))
        d = self.z_dim
        z_b = out[..., 2 * d:].reshape(*out.shape[:-1], 4, d)
        return HyperZ(out[..., :d], out[..., d:2 * d], z_b)


class HyperLSTMCell(nn.Module):
    """LSTM whose per-gate weights and biases are rescaled by hypernetwork vectors.

    Weights are stacked over the gate axis in the order i, g, f, o.
    """

    def __init__(self, n_x: int, n_h: int, z_dim: int):
        super().__init__()
        self.n_x, self.n_h, self.z_dim = n_x, n_h, z_dim
        s = 1.0 / math.sqrt(n_h)
        self.W_h = nn.Parameter(torch.empty(4, n_h, n_h, dtype=DTYPE).uniform_(-s, s))
        self.W_x = nn.Parameter(torch.empty(4, n_h, n_x, dtype=DTYPE).uniform_(-s, s))
        self.b0 = nn.Parameter(torch.zeros(4, n_h, dtype=DTYPE))
        self.W_hz = nn.Parameter(torch.full((4, n_h, z_dim), 1.0 / z_dim, dtype=DTYPE))
        self.W_xz = nn.Parameter(torch.full((4, n_h, z_dim), 1.0 / z_dim, dtype=DTYPE))
        self.W_bz = nn.Parameter(torch.zeros(4, n_h, z_dim, dtype=DTYPE))
        with torch.no_grad():
            self.b0[2].fill_(1.0)  # forget gate

    def modulation(self, z: HyperZ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(d_h, d_x, b), each (..., 4, n_h)."""
        d_h = torch.einsum("gnd,...d->...gn", self.W_hz, z.z_h)
        d_x = torch.einsum("gnd,...d->...gn", self.W_xz, z.z_x)
        b = torch.einsum("gnd,...gd->...gn", self.W_bz, z.z_b) + self.b0
        return d_h, d_x, b

    def preactivations(self, mod, x, h):
        d_h, d_x, b = mod
        wh = torch.einsum("gnk,...k->...gn", self.W_h, h)
        wx = torch.einsum("gnk,...k->...gn", self.W_x, x)
        return layer_norm(d_h * wh + d_x * wx + b)

    def forward(self, mod, x, h, m):
        pre = self.preactivations(mod, x, h)
        i, g, f, o = pre.unbind(-2)
        m = torch.sigmoid(f) * m + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(m)
        return h, m

    def plain_step(self, x, h, m):
        """Unmodulated LSTM step without layer norm, using W_h, W_x, b0."""
        pre = (torch.einsum("gnk,...k->...gn", self.W_h, h)
               + torch.einsum("gnk,...k->...gn", self.W_x, x) + self.b0)
        i, g, f, o = pre.unbind(-2)
        m = torch.sigmoid(f) * m + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(m)
        return h, m


def hyperlstm_step(cell: HyperLSTMCell, z: HyperZ, x, h, m):
    return cell(cell.modulation(z), x, h, m)


class Predictor(nn.Module):
    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        self.cfg = cfg
        # every submodule is built regardless of flags so that ablations share initial weights
        self.encoder = nn.LSTM(2, cfg.enc_hidden, batch_first=True, dtype=DTYPE)
        self.projection = Projection(cfg.enc_hidden, cfg.d_proj)
        self.seed_x = nn.Linear(cfg.enc_hidden, cfg.dec_input, dtype=DTYPE)
        self.seed_h = nn.Linear(cfg.enc_hidden, cfg.dec_hidden, dtype=DTYPE)
        self.hypernet = HyperNet(cfg.enc_hidden, cfg.hyper_hidden, cfg.z_dim)
        self.cell = HyperLSTMCell(cfg.dec_input, cfg.dec_hidden, cfg.z_dim)
        s = 1.0 / math.sqrt(cfg.dec_hidden)
        self.head_W = nn.Parameter(torch.empty(cfg.K, 2, cfg.dec_hidden, dtype=DTYPE).uniform_(-s, s))
        self.head_b = nn.Parameter(torch.empty(cfg.K, 2, dtype=DTYPE).uniform_(-0.1, 0.1))
        self.feedback = nn.Linear(2, cfg.dec_input, dtype=DTYPE)

    def encode(self, obs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """obs (B, T_obs, 2) -> (v (B, enc_hidden), projected (B, d_proj))."""
        disp = obs[:, 1:] - obs[:, :-1]
        _, (h, _) = self.encoder(disp)
        v = h[-1]
        return v, self.projection(v)

    def decode(self, v: torch.Tensor) -> torch.Tensor:
        """v (B, enc_hidden) -> positions (B, K, T_pred, 2) relative to the last observed point."""
        x = self.seed_x(v)
        h = self.seed_h(v)
        m = torch.zeros_like(h)
        mod = self.cell.modulation(self.hypernet(v)) if self.cfg.use_hyper else None
        hs = []
        for _ in range(self.cfg.T_pred):
            if mod is not None:
                h, m = self.cell(mod, x, h, m)
            else:
                h, m = self.cell.plain_step(x, h, m)
            hs.append(h)
            if self.cfg.autoregressive:
                step = torch.einsum("kcn,bn->bkc", self.head_W, h).mean(1) + self.head_b.mean(0)
                x = self.seed_x(v) + self.feedback(step)
        H = torch.stack(hs, dim=1)  # (B, T, N_h)
        disp = torch.einsum("kcn,btn->bktc", self.head_W, H) + self.head_b[None, :, None, :]
        return disp.cumsum(dim=2)

    def forward(self, obs: torch.Tensor):
        v, proj = self.encode(obs)
        return self.decode(v), proj, v


def head_errors(pred: torch.Tensor, gt: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-head (ADE, MSE), each (..., K). MSE is the mean over steps of squared L2 distance."""
    diff = pred - gt.unsqueeze(-3)
    sq = (diff * diff).sum(-1)
    ade = torch.sqrt(sq).mean(-1)
    return ade, sq.mean(-1)


def ewta_per_sample(pred: torch.Tensor, gt: torch.Tensor, k_winners: int) -> torch.Tensor:
    """Mean MSE over the k heads with the lowest ADE; pred (..., K, T, 2), gt (..., T, 2)."""
    K = pred.shape[-3]
    if not 1 <= k_winners <= K:
        raise ContractError(f"k_winners must lie in [1, {K}], got {k_winners}")
    with torch.no_grad():
        ade, _ = head_errors(pred, gt)
        winners = ade.topk(k_winners, dim=-1, largest=False).indices
    _, mse = head_errors(pred, gt)
    return mse.gather(-1, winners).mean(-1)


def ewta_loss(pred: torch.Tensor, gt: torch.Tensor, k_winners: int) -> torch.Tensor:
    return ewta_per_sample(pred, gt, k_winners).mean()


def ewta_k(epoch: int, K: int, stage_epochs: int) -> int:
    """Winner count: K halved once per completed stage, floored at 1."""
    return max(1, K >> (epoch // max(1, stage_epochs)))
