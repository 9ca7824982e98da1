"""Sequencing of frame streams and pre-training data screening."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from motus.ingest import FRAME_PERIOD_S, FrameTensor

SEQ_LEN = 260


class ScreeningMode(str, Enum):
    NONE = "none"
    QUALITY = "quality"
    QUALITY_PLAYTIME = "quality-playtime"


@dataclass
class Sequence:
    frames: np.ndarray  # (260, 120, 24)
    pad_mask: np.ndarray  # (260,) True = real frame
    sensor_valid: np.ndarray  # (260, 4)
    playtime_fraction: float
    recording_id: str
    start_index: int

    @property
    def seq_id(self) -> str:
        return f"{self.recording_id}:{self.start_index}"

    @property
    def n_real(self) -> int:
        return int(self.pad_mask.sum())


@dataclass
class ScreeningPolicy:
    mode: ScreeningMode = ScreeningMode.NONE
    dropout_frame_fraction: float = 0.20
    min_playtime_fraction: float = 1.0

    def __post_init__(self):
        self.mode = ScreeningMode(self.mode)
        for name in ("dropout_frame_fraction", "min_playtime_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class ScreeningReport:
    mode: str
    n_input: int
    n_kept: int
    n_excluded: int
    excluded_quality: int
    excluded_playtime: int
    kept_real_frames: int
    excluded_real_frames: int

    @property
    def kept_hours(self) -> float:
        return frames_to_hours(self.kept_real_frames)

    @property
    def excluded_hours(self) -> float:
        return frames_to_hours(self.excluded_real_frames)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kept_hours"] = self.kept_hours
        d["excluded_hours"] = self.excluded_hours
        return d


def frames_to_hours(n_frames: int) -> float:
    # one hop of new signal per frame
    return n_frames * FRAME_PERIOD_S / 3600.0


def sequence_split(ft: FrameTensor, seq_len: int = SEQ_LEN) -> list[Sequence]:
    """Cut a recording into consecutive blocks; the last one is zero-padded."""
    n = len(ft)
    out = []
    for start in range(0, n, seq_len):
        stop = min(start + seq_len, n)
        real = stop - start
        if real == seq_len:
            frames = ft.frames[start:stop]
            valid = ft.sensor_valid[start:stop]
        else:
            frames = np.zeros((seq_len,) + ft.frames.shape[1:], dtype=ft.frames.dtype)
            frames[:real] = ft.frames[start:stop]
            valid = np.zeros((seq_len, ft.sensor_valid.shape[1]), dtype=bool)
            valid[:real] = ft.sensor_valid[start:stop]
        pad_mask = np.zeros(seq_len, dtype=bool)
        pad_mask[:real] = True
        out.append(Sequence(
            frames=frames,
            pad_mask=pad_mask,
            sensor_valid=valid,
            playtime_fraction=float(ft.in_playtime[start:stop].mean()),
            recording_id=ft.recording_id,
            start_index=start,
        ))
    return out


def dropped_fraction(seq: Sequence) -> float:
    """Fraction of real frames with two or more invalid sensors."""
    real = seq.pad_mask
    if not real.any():
        return 0.0
    dropped = (~seq.sensor_valid[real]).sum(axis=1) >= 2
    return float(dropped.mean())


def passes(seq: Sequence, policy: ScreeningPolicy) -> tuple[bool, str | None]:
    if policy.mode is ScreeningMode.NONE:
        return True, None
    if dropped_fraction(seq) > policy.dropout_frame_fraction:
        return False, "quality"
    if (policy.mode is ScreeningMode.QUALITY_PLAYTIME
            and seq.playtime_fraction < policy.min_playtime_fraction):
        return False, "playtime"
    return True, None


def screen(seqs: list[Sequence], policy: ScreeningPolicy) -> tuple[list[Sequence], ScreeningReport]:
    kept = []
    reasons = {"quality": 0, "playtime": 0}
    kept_frames = excluded_frames = 0
    for seq in seqs:
        ok, why = passes(seq, policy)
        if ok:
            kept.append(seq)
            kept_frames += seq.n_real
        else:
            reasons[why] += 1
            excluded_frames += seq.n_real
    report = ScreeningReport(
        mode=policy.mode.value,
        n_input=len(seqs),
        n_kept=len(kept),
        n_excluded=len(seqs) - len(kept),
        excluded_quality=reasons["quality"],
        excluded_playtime=reasons["playtime"],
        kept_real_frames=kept_frames,
        excluded_real_frames=excluded_frames,
    )
    return kept, report


def flatness(seq: Sequence) -> float:
    """Mean over real frames and channels of the within-frame standard deviation."""
    real = seq.frames[seq.pad_mask]
    if len(real) == 0:
        return 0.0
    return float(real.astype(np.float64).std(axis=1).mean())
