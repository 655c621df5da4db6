"""Constant-velocity Kalman predictor used as a hardness score."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .trajdata import DatasetSplit, TrajectorySample, raw_sample


@dataclass(frozen=True)
class KalmanConfig:
    process_noise_sigma: float = 0.5
    obs_noise_sigma: float = 0.05
    dt: float = 0.4

    def __post_init__(self):
        if self.process_noise_sigma <= 0 or self.obs_noise_sigma <= 0:
            raise ValueError("Kalman noise parameters must be positive")


def _model(cfg: KalmanConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    dt = cfg.dt
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    # discrete white-noise acceleration
    g = np.array([[0.5 * dt * dt, 0.0], [0.0, 0.5 * dt * dt], [dt, 0.0], [0.0, dt]])
    Q = cfg.process_noise_sigma ** 2 * g @ g.T
    H = np.zeros((2, 4))
    H[0, 0] = H[1, 1] = 1.0
    R = cfg.obs_noise_sigma ** 2 * np.eye(2)
    return F, Q, H, R


def kalman_predict(obs: np.ndarray, T_pred: int, cfg: KalmanConfig = KalmanConfig()) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if len(obs) < 2:
        raise ValueError("kalman_predict needs at least 2 observations")
    F, Q, H, R = _model(cfg)
    x = np.concatenate([obs[1], (obs[1] - obs[0]) / cfg.dt])
    P = np.eye(4)
    for z in obs[2:]:
        x = F @ x
        P = F @ P @ F.T + Q
        # innovation form; residual is exactly zero on noiseless CV input
        y = z - H @ x
        S = H @ P @ H.T + R
        K = np.linalg.solve(S, H @ P).T
        x = x + K @ y
        P = (np.eye(4) - K @ H) @ P
    out = np.empty((T_pred, 2))
    for t in range(T_pred):
        x = F @ x
        out[t] = x[:2]
    return out


def kalman_fde(sample: TrajectorySample, T_pred: int, cfg: KalmanConfig) -> float:
    obs, fut = raw_sample(sample)
    pred = kalman_predict(obs, T_pred, cfg)
    return float(np.linalg.norm(pred[-1] - fut[-1]))


def kalman_scores(samples: DatasetSplit | list[TrajectorySample], cfg: KalmanConfig | None = None,
                  T_pred: int | None = None) -> np.ndarray:
    """Per-sample Kalman FDE in raw coordinates (test split when given a DatasetSplit)."""
    if isinstance(samples, DatasetSplit):
        cfg = cfg or KalmanConfig(dt=samples.dt)
        T_pred = samples.T_pred
        samples = samples.test
    cfg = cfg or KalmanConfig()
    if T_pred is None:
        T_pred = len(samples[0].fut) if samples else 0
    return np.array([kalman_fde(s, T_pred, cfg) for s in samples])


def write_scores_csv(path: str | Path, sample_ids, scores) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "kalman_fde"])
        for sid, sc in zip(sample_ids, scores):
            w.writerow([int(sid), repr(float(sc))])
