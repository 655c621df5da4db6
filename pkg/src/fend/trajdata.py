"""Trajectory samples: ETH-UCY text ingestion, rigid normalization, synthetic long-tail data."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

T_OBS = 8
T_PRED = 12
DT = 0.4

HEAD = 0
TURN, ACCELERATE, BRAKE, REVERSE = 1, 2, 3, 4
PATTERN_NAMES = {HEAD: "head", TURN: "turn", ACCELERATE: "accelerate", BRAKE: "brake", REVERSE: "reverse"}

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending setting."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class TrajectorySample:
    obs: np.ndarray  # (T_obs, 2)
    fut: np.ndarray  # (T_pred, 2)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))
    rotation: float = 0.0
    sample_id: int = 0
    pattern_label: int | None = None

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([self.obs, self.fut], axis=0)


@dataclass
class DatasetSplit:
    train: list[TrajectorySample]
    test: list[TrajectorySample]
    T_obs: int = T_OBS
    T_pred: int = T_PRED
    dt: float = DT
    meta: dict = field(default_factory=dict)


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def normalize(obs: np.ndarray, fut: np.ndarray, sample_id: int = 0,
              pattern_label: int | None = None) -> TrajectorySample:
    """Translate the last observed point to the origin and rotate its velocity onto +x."""
    obs = np.asarray(obs, dtype=np.float64)
    fut = np.asarray(fut, dtype=np.float64)
    if len(obs) < 2:
        raise ValueError("normalize needs at least 2 observed points")
    translation = obs[-1].copy()
    vel = obs[-1] - obs[-2]
    rotation = math.atan2(vel[1], vel[0]) if np.hypot(*vel) >= 1e-12 else 0.0
    # row vectors: p @ R(-theta).T == R(-theta) p
    r = _rot(-rotation).T
    n_obs = (obs - translation) @ r
    n_fut = (fut - translation) @ r
    n_obs[-1] = 0.0
    return TrajectorySample(n_obs, n_fut, translation, rotation, sample_id, pattern_label)


def denormalize(sample: TrajectorySample, pred: np.ndarray) -> np.ndarray:
    """Map positions (..., 2) from the sample's normalized frame back to raw coordinates."""
    return np.asarray(pred) @ _rot(sample.rotation).T + sample.translation


def raw_sample(sample: TrajectorySample) -> tuple[np.ndarray, np.ndarray]:
    return denormalize(sample, sample.obs), denormalize(sample, sample.fut)


# --- ETH-UCY text ---

def read_tracks(path: str | Path) -> dict[int, list[tuple[int, float, float]]]:
    tracks: dict[int, list[tuple[int, float, float]]] = defaultdict(list)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 'frame_id agent_id x y', got {line.strip()!r}")
            try:
                frame = int(float(parts[0]))
                agent = int(float(parts[1]))
                x, y = float(parts[2]), float(parts[3])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: unparseable row {line.strip()!r}") from None
            tracks[agent].append((frame, x, y))
    for agent in tracks:
        tracks[agent].sort()
    return dict(tracks)


def _contiguous_runs(frames: list[tuple[int, float, float]]) -> list[list[tuple[int, float, float]]]:
    """Split a track wherever the frame stride changes or a frame repeats."""
    if len(frames) < 2:
        return [frames]
    runs, cur = [], [frames[0]]
    stride = None
    for prev, nxt in zip(frames, frames[1:]):
        d = nxt[0] - prev[0]
        if d > 0 and (stride is None or d == stride):
            stride = d
            cur.append(nxt)
        else:
            runs.append(cur)
            cur, stride = [nxt], None
    runs.append(cur)
    return runs


def window_count(track_len: int, T_obs: int, T_pred: int) -> int:
    return max(0, track_len - (T_obs + T_pred) + 1)


def load_ethucy_text(path: str | Path, T_obs: int = T_OBS, T_pred: int = T_PRED,
                     dt: float = DT, test_fraction: float = 0.2, seed: int = 0) -> DatasetSplit:
    """Stride-1 windows per agent track, normalized; split by sample at random."""
    if T_obs < 2 or T_pred < 2:
        raise ConfigError("T_obs" if T_obs < 2 else "T_pred", "must be >= 2")
    tracks = read_tracks(path)
    L = T_obs + T_pred
    samples = []
    for agent in sorted(tracks):
        for run in _contiguous_runs(tracks[agent]):
            xy = np.array([(x, y) for _, x, y in run], dtype=np.float64)
            for s in range(window_count(len(xy), T_obs, T_pred)):
                w = xy[s:s + L]
                samples.append(normalize(w[:T_obs], w[T_obs:], sample_id=len(samples)))
    if not samples:
        raise EmptyDatasetError(f"{path}: no track has {L} consecutive frames")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_test = int(round(test_fraction * len(samples)))
    test_ids = set(order[:n_test].tolist())
    train = [s for s in samples if s.sample_id not in test_ids]
    test = [s for s in samples if s.sample_id in test_ids]
    return DatasetSplit(train, test, T_obs, T_pred, dt, {"source": str(path)})


# --- synthetic long-tail data ---

def _unroll(speed0: float, heading: float, accel: np.ndarray, yaw_rate: np.ndarray,
            dt: float, start: np.ndarray) -> np.ndarray:
    """Integrate per-step longitudinal accel and yaw rate into positions (len(accel)+1 points)."""
    pts = [start]
    v, h = speed0, heading
    p = start.copy()
    for a, w in zip(accel, yaw_rate):
        v_next = v + a * dt
        h_next = h + w * dt
        # trapezoid on speed, midpoint heading
        step = 0.5 * (v + v_next) * dt
        hm = 0.5 * (h + h_next)
        p = p + step * np.array([math.cos(hm), math.sin(hm)])
        pts.append(p)
        v, h = v_next, h_next
    return np.array(pts)


def _synth_track(pattern: int, rng: np.random.Generator, T_obs: int, T_pred: int, dt: float) -> np.ndarray:
    L = T_obs + T_pred
    n_steps = L - 1
    t_obs_end = (T_obs - 1) * dt
    horizon = T_pred * dt
    heading = rng.uniform(0.0, 2 * math.pi)
    start = rng.uniform(-10.0, 10.0, size=2)
    accel = np.zeros(n_steps)
    yaw = np.zeros(n_steps)
    # step k covers time [k dt, (k+1) dt]; the future starts at step T_obs-1
    future = np.arange(n_steps) >= T_obs - 1

    if pattern == HEAD:
        speed0 = rng.uniform(0.5, 2.0)
    elif pattern == TURN:
        speed0 = rng.uniform(0.5, 2.0)
        rate = math.radians(rng.uniform(20.0, 60.0)) * rng.choice([-1.0, 1.0])
        yaw[future] = rate
    elif pattern == ACCELERATE:
        speed0 = rng.uniform(0.5, 2.0)
        accel[:] = rng.uniform(0.5, 1.5)
    elif pattern == BRAKE:
        # constant deceleration reaching zero speed inside the future horizon
        t_stop = t_obs_end + rng.uniform(0.3, 0.8) * horizon
        speed_end = rng.uniform(0.5, 2.0)  # speed at the last observed frame
        decel = speed_end / (t_stop - t_obs_end)
        speed0 = speed_end + decel * t_obs_end
        times = np.arange(n_steps) * dt
        for k, t in enumerate(times):
            # clip so the integrated speed stops at exactly zero
            v_k = speed0 - decel * t
            accel[k] = -min(decel, max(v_k, 0.0) / dt)
    elif pattern == REVERSE:
        # same deceleration through zero, then back along the incoming direction
        t_stop = t_obs_end + rng.uniform(0.2, 0.5) * horizon
        speed_end = rng.uniform(0.5, 2.0)
        decel = speed_end / (t_stop - t_obs_end)
        speed0 = speed_end + decel * t_obs_end
        accel[:] = -decel
    else:
        raise ValueError(f"unknown pattern {pattern}")
    return _unroll(speed0, heading, accel, yaw, dt, start)


def synth_longtail(n: int, tail_fraction: float = 0.1, seed: int = 0, T_obs: int = T_OBS,
                   T_pred: int = T_PRED, dt: float = DT, noise_sigma: float = 0.01) -> DatasetSplit:
    """Constant-velocity head samples plus four equally sized tail motion patterns.

    Labels: 0 head, 1 turn, 2 accelerate, 3 brake-to-stop, 4 reverse. The split
    is 80/20 stratified by label; everything derives from ``seed``.
    """
    if not 0.0 < tail_fraction < 1.0:
        raise ConfigError("tail_fraction", f"must lie in (0, 1), got {tail_fraction}")
    if n < 100:
        raise ConfigError("n", f"must be >= 100, got {n}")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma", "must be >= 0")
    n_tail = int(round(n * tail_fraction))
    per_pattern = [n_tail // 4 + (1 if i < n_tail % 4 else 0) for i in range(4)]
    labels = [HEAD] * (n - n_tail)
    for pat, cnt in zip((TURN, ACCELERATE, BRAKE, REVERSE), per_pattern):
        labels += [pat] * cnt

    rng = np.random.default_rng(seed)
    samples = []
    for sid, lab in enumerate(labels):
        xy = _synth_track(lab, rng, T_obs, T_pred, dt)
        if noise_sigma > 0:
            xy = xy + rng.normal(0.0, noise_sigma, size=xy.shape)
        samples.append(normalize(xy[:T_obs], xy[T_obs:], sample_id=sid, pattern_label=lab))

    train, test = [], []
    for lab in sorted(set(labels)):
        group = [s for s in samples if s.pattern_label == lab]
        perm = rng.permutation(len(group))
        n_test = int(round(0.2 * len(group)))
        test_idx = set(perm[:n_test].tolist())
        for i, s in enumerate(group):
            (test if i in test_idx else train).append(s)
    train.sort(key=lambda s: s.sample_id)
    test.sort(key=lambda s: s.sample_id)
    meta = {"generator": "synth_longtail", "n": n, "tail_fraction": tail_fraction, "seed": seed,
            "noise_sigma": noise_sigma}
    return DatasetSplit(train, test, T_obs, T_pred, dt, meta)


# --- JSON ---

def _sample_to_dict(s: TrajectorySample) -> dict:
    return {
        "sample_id": s.sample_id,
        "pattern_label": s.pattern_label,
        "translation": s.translation.tolist(),
        "rotation": s.rotation,
        "obs": s.obs.tolist(),
        "fut": s.fut.tolist(),
    }


def _sample_from_dict(d: dict) -> TrajectorySample:
    return TrajectorySample(np.array(d["obs"], dtype=np.float64), np.array(d["fut"], dtype=np.float64),
                            np.array(d["translation"], dtype=np.float64), float(d["rotation"]),
                            int(d["sample_id"]), d.get("pattern_label"))


def split_to_json(split: DatasetSplit) -> str:
    doc = {
        "meta": {"format_version": FORMAT_VERSION, "T_obs": split.T_obs, "T_pred": split.T_pred,
                 "dt": split.dt, **split.meta},
        "train": [_sample_to_dict(s) for s in split.train],
        "test": [_sample_to_dict(s) for s in split.test],
    }
    return json.dumps(doc, sort_keys=False)


def save_split(split: DatasetSplit, path: str | Path) -> None:
    Path(path).write_text(split_to_json(split))


def load_split(path: str | Path) -> DatasetSplit:
    doc = json.loads(Path(path).read_text())
    meta = dict(doc["meta"])
    if meta.pop("format_version", None) != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported dataset format version")
    T_obs, T_pred, dt = meta.pop("T_obs"), meta.pop("T_pred"), meta.pop("dt")
    return DatasetSplit([_sample_from_dict(d) for d in doc["train"]],
                        [_sample_from_dict(d) for d in doc["test"]], T_obs, T_pred, dt, meta)


def stack(samples: list[TrajectorySample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays (n, T_obs, 2) and (n, T_pred, 2)."""
    return np.stack([s.obs for s in samples]), np.stack([s.fut for s in samples])
