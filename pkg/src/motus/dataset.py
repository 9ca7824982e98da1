"""Splitting, label subsampling, minibatching and augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence as Seq

import numpy as np
from scipy.spatial.transform import Rotation

from motus.ingest import N_SENSORS


class SplitError(ValueError):
    pass


@dataclass
class AugmentConfig:
    p_sample_dropout: float = 0.0
    p_sensor_dropout: float = 0.0
    p_rotation: float = 0.0
    rotation_limit_deg: float = 15.0

    def __post_init__(self):
        for name in ("p_sample_dropout", "p_sensor_dropout", "p_rotation"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")

    @property
    def is_identity(self) -> bool:
        return self.p_sample_dropout == 0 and self.p_sensor_dropout == 0 and self.p_rotation == 0

    @classmethod
    def pretrain(cls) -> "AugmentConfig":
        return cls(p_sample_dropout=0.1, p_sensor_dropout=0.1, p_rotation=0.3)

    @classmethod
    def finetune(cls) -> "AugmentConfig":
        return cls(p_sample_dropout=0.3, p_sensor_dropout=0.3)


@dataclass
class Fold:
    index: int
    train: list[str]
    val: list[str]
    test: list[str]


def split_pretrain(seqs: Seq, seed: int) -> tuple[list, list]:
    """Random 80:20 split by sequence; train gets round(0.8 n)."""
    n = len(seqs)
    if n < 2:
        raise SplitError(f"need at least 2 sequences to split, got {n}")
    n_train = min(max(int(np.floor(0.8 * n + 0.5)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    train = [seqs[i] for i in sorted(order[:n_train])]
    val = [seqs[i] for i in sorted(order[n_train:])]
    return train, val


def kfold_recordings(recording_ids: Seq[str], k: int = 10, seed: int = 0) -> list[Fold]:
    """Recording-level k-fold with an 80:20 train/val split of each remainder."""
    ids = list(recording_ids)
    if len(set(ids)) != len(ids):
        raise SplitError("duplicate recording ids")
    if len(ids) < k:
        raise SplitError(f"need at least k={k} recordings, got {len(ids)}")
    rng = np.random.default_rng(seed)
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    chunks = np.array_split(np.arange(len(ids)), k)
    folds = []
    for i, chunk in enumerate(chunks):
        test = [shuffled[j] for j in chunk]
        rest = [r for r in shuffled if r not in set(test)]
        rest = [rest[j] for j in rng.permutation(len(rest))]
        n_train = min(max(int(np.floor(0.8 * len(rest) + 0.5)), 1), max(len(rest) - 1, 1))
        folds.append(Fold(index=i, train=sorted(rest[:n_train]), val=sorted(rest[n_train:]),
                          test=sorted(test)))
    return folds


def subsample_labels(labels: Seq[np.ndarray], usable: Seq[np.ndarray], fraction: float,
                     rng: np.random.Generator, num_classes: int = 9) -> list[np.ndarray]:
    """Pick ``fraction`` of usable frames across recordings, uniformly at random.

    Every class present among usable frames keeps at least one frame.
    Returns one boolean selection mask per recording.
    """
    masks = [np.zeros(len(u), dtype=bool) for u in usable]
    if fraction >= 1.0:
        return [np.asarray(u, dtype=bool).copy() for u in usable]
    flat = [(r, i) for r, u in enumerate(usable) for i in np.flatnonzero(u)]
    if not flat:
        return masks
    n_sel = max(1, int(np.floor(fraction * len(flat) + 0.5)))
    chosen = rng.choice(len(flat), size=n_sel, replace=False)
    for c in chosen:
        r, i = flat[c]
        masks[r][i] = True
    for cls in range(num_classes):
        if any((masks[r] & (labels[r] == cls)).any() for r in range(len(masks))):
            continue
        pool = [(r, i) for r, i in flat if labels[r][i] == cls]
        if pool:
            r, i = pool[rng.integers(len(pool))]
            masks[r][i] = True
    return masks


def rotation_matrices(angles_deg: np.ndarray) -> np.ndarray:
    """Rotation matrices from (..., 3) yaw/pitch/roll, intrinsic Z-Y-X."""
    a = np.asarray(angles_deg, dtype=np.float64)
    mats = Rotation.from_euler("ZYX", a.reshape(-1, 3), degrees=True).as_matrix()
    return mats.reshape(a.shape[:-1] + (3, 3))


def rotate_frames(frames: np.ndarray, mats: np.ndarray) -> np.ndarray:
    """Apply per-sensor rotations (F, 4, 3, 3) to accel and gyro triplets of (F, L, 24)."""
    f, length, _ = frames.shape
    x = frames.reshape(f, length, N_SENSORS, 2, 3).astype(np.float64)
    y = np.einsum("fsij,flstj->flsti", mats, x)
    return y.reshape(f, length, -1).astype(frames.dtype)


def augment(frames: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Randomly perturb a batch of frames shaped (..., 120, 24)."""
    if cfg.is_identity:
        return frames
    shape = frames.shape
    x = np.array(frames, copy=True).reshape((-1,) + shape[-2:])
    f, length, channels = x.shape
    if cfg.p_rotation > 0:
        pick = np.flatnonzero(rng.random(f) < cfg.p_rotation)
        if len(pick):
            lim = cfg.rotation_limit_deg
            angles = rng.uniform(-lim, lim, size=(len(pick), N_SENSORS, 3))
            x[pick] = rotate_frames(x[pick], rotation_matrices(angles))
    if cfg.p_sample_dropout > 0:
        x[rng.random((f, length)) < cfg.p_sample_dropout] = 0.0
    if cfg.p_sensor_dropout > 0:
        drop = rng.random((f, N_SENSORS)) < cfg.p_sensor_dropout
        x.reshape(f, length, N_SENSORS, channels // N_SENSORS)[
            np.broadcast_to(drop[:, None, :], (f, length, N_SENSORS))] = 0.0
    return x.reshape(shape)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def batch_pretrain(items: Seq, batch_size: int = 32, seed: int = 0,
                   epoch: int = 0) -> Iterator[list]:
    """Shuffled minibatches for one epoch; the last short batch is kept."""
    order = epoch_rng(seed, epoch).permutation(len(items))
    for i in range(0, len(items), batch_size):
        yield [items[j] for j in order[i:i + batch_size]]
