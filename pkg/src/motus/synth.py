"""Synthetic multi-sensor corpora with Markov-switching movement regimes.

Each of the nine movement classes has a per-sensor signature (oscillation
frequency, accelerometer and gyroscope amplitude, motion axes, gyro drift).
Signatures come from ``signature_seed`` so that an unlabeled pre-training
corpus and a labeled fine-tuning corpus describe the same classes.
Recordings add subject variability (amplitude/frequency scaling, sensor
mounting rotation), white sensor noise, Bluetooth outages (missing packet
runs) and, outside playtime, near-flat resting data.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from motus.dataset import rotation_matrices
from motus.ingest import (FRAME_LEN, FRAME_PERIOD_S, FS, N_SENSORS, FrameTensor, LabelTrack,
                          RawRecording, frame_count, make_packets)
from motus.screening import SEQ_LEN

CLASS_PRIOR = (0.22, 0.05, 0.05, 0.07, 0.07, 0.14, 0.14, 0.16, 0.10)


@dataclass
class SynthSpec:
    n_recordings: int = 6
    duration_s: tuple[float, float] = (600.0, 900.0)
    labeled: bool = True
    class_prior: tuple[float, ...] = CLASS_PRIOR
    dwell_mean_s: float = 12.0
    dwell_min_s: float = 3.0
    playtime_fraction: float = 1.0
    playtime_block_s: float = 600.0
    p_sensor_outage: float = 0.0  # per sensor, per second
    p_link_outage: float = 0.0  # all sensors at once, per second
    outage_mean_s: float = 20.0
    agreement_noise: float = 0.05
    p_unqualified: float = 0.02
    accel_noise_g: float = 0.03
    gyro_noise_dps: float = 3.0
    flat_accel_noise_g: float = 2e-4
    flat_gyro_noise_dps: float = 0.02
    amplitude_jitter: float = 0.3
    frequency_jitter: float = 0.1
    mount_jitter_deg: float = 20.0
    packet_jitter_s: float = 0.002
    signature_seed: int = 7
    seed: int = 0
    id_prefix: str = "rec"

    def __post_init__(self):
        self.duration_s = tuple(self.duration_s)
        self.class_prior = tuple(self.class_prior)
        if len(self.class_prior) != 9:
            raise ValueError("class_prior needs 9 entries")
        if not 0.0 <= self.playtime_fraction <= 1.0:
            raise ValueError("playtime_fraction must lie in [0, 1]")
        if self.duration_s[0] > self.duration_s[1] or self.duration_s[0] <= 0:
            raise ValueError("bad duration range")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Signatures:
    freq: np.ndarray  # (9, 4) Hz
    accel_amp: np.ndarray  # (9, 4) g
    gyro_amp: np.ndarray  # (9, 4) deg/s
    gyro_drift: np.ndarray  # (9, 4) deg/s
    accel_axis: np.ndarray  # (9, 4, 3) unit vectors
    gyro_axis: np.ndarray  # (9, 4, 3)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def class_signatures(seed: int) -> Signatures:
    rng = np.random.default_rng([seed, 99])
    k, s = 9, N_SENSORS
    freq = rng.uniform(0.6, 3.0, (k, s))
    accel_amp = rng.uniform(0.05, 0.35, (k, s))
    gyro_amp = rng.uniform(10.0, 70.0, (k, s))
    drift = rng.uniform(-15.0, 15.0, (k, s))
    # still: barely any motion
    accel_amp[0] = 0.01
    gyro_amp[0] = 2.0
    drift[0] = 0.0
    # the directional pairs mirror each other across body sides (0/2 left, 1/3 right)
    for left, right in ((1, 2), (3, 4)):
        freq[right] = freq[left][[1, 0, 3, 2]]
        accel_amp[right] = accel_amp[left][[1, 0, 3, 2]]
        gyro_amp[right] = gyro_amp[left][[1, 0, 3, 2]]
        drift[right] = -drift[left][[1, 0, 3, 2]]
    accel_axis = _unit(rng.normal(size=(k, s, 3)))
    gyro_axis = _unit(rng.normal(size=(k, s, 3)))
    return Signatures(freq, accel_amp, gyro_amp, drift, accel_axis, gyro_axis)


def _regimes(duration, spec: SynthSpec, rng):
    """Markov chain of (start, class) pairs covering [0, duration)."""
    prior = np.asarray(spec.class_prior, dtype=np.float64)
    prior = prior / prior.sum()
    starts, classes = [], []
    t, c = 0.0, int(rng.choice(9, p=prior))
    while t < duration:
        starts.append(t)
        classes.append(c)
        t += spec.dwell_min_s + rng.exponential(spec.dwell_mean_s)
        p = prior.copy()
        p[c] = 0.0
        c = int(rng.choice(9, p=p / p.sum()))
    return np.asarray(starts), np.asarray(classes)


def _playtime(duration, spec: SynthSpec, rng) -> list[tuple[float, float]]:
    if spec.playtime_fraction >= 1.0:
        return [(0.0, duration + 1.0)]
    if spec.playtime_fraction <= 0.0:
        return []
    intervals = []
    t = 0.0
    frac = spec.playtime_fraction
    on_mean = spec.playtime_block_s * frac / (1.0 - frac) if frac < 1 else spec.playtime_block_s
    off_mean = spec.playtime_block_s
    on = rng.random() < frac
    while t < duration:
        length = rng.exponential(on_mean if on else off_mean) + 30.0
        if on:
            intervals.append((t, min(t + length, duration + 1.0)))
        t += length
        on = not on
    return intervals


def _outages(duration, spec: SynthSpec, rng) -> list[list[tuple[float, float]]]:
    out = [[] for _ in range(N_SENSORS)]
    for rate, sensors in [(spec.p_link_outage, list(range(N_SENSORS)))] + [
            (spec.p_sensor_outage, [s]) for s in range(N_SENSORS)]:
        if rate <= 0:
            continue
        n = rng.poisson(rate * duration)
        for a in np.sort(rng.uniform(2.0, duration, n)):
            b = a + rng.exponential(spec.outage_mean_s) + 1.0
            for s in sensors:
                out[s].append((a, b))
    return out


def _in_any(t, intervals):
    m = np.zeros(len(t), dtype=bool)
    for a, b in intervals:
        m |= (t >= a) & (t < b)
    return m


def generate_recording(index: int, spec: SynthSpec, sig: Signatures) -> RawRecording:
    rng = np.random.default_rng([spec.seed, index])
    duration = float(rng.uniform(*spec.duration_s))
    starts, classes = _regimes(duration, spec, rng)
    playtime = _playtime(duration, spec, rng)
    outages = _outages(duration, spec, rng)

    amp_scale = 1.0 + rng.uniform(-spec.amplitude_jitter, spec.amplitude_jitter, N_SENSORS)
    freq_scale = 1.0 + rng.uniform(-spec.frequency_jitter, spec.frequency_jitter)
    mount = rotation_matrices(rng.uniform(-spec.mount_jitter_deg, spec.mount_jitter_deg,
                                          (N_SENSORS, 3)))
    gravity = _unit(np.array([0.0, 0.0, 1.0]) + rng.normal(0, 0.3, (N_SENSORS, 3)))
    regime_phase = rng.uniform(0, 2 * np.pi, (len(starts), N_SENSORS))

    n_packets = int(np.floor(duration * FS)) + 1
    base_t = np.arange(n_packets) / FS
    jitter = rng.uniform(-spec.packet_jitter_s, spec.packet_jitter_s, n_packets)
    jitter[0] = 0.0
    t = base_t + jitter
    reg = np.searchsorted(starts, t, side="right") - 1
    cls = classes[reg]
    moving = _in_any(t, playtime)

    sensors = []
    for s in range(N_SENSORS):
        f = sig.freq[cls, s] * freq_scale
        phase = 2 * np.pi * np.cumsum(f) / FS + regime_phase[reg, s]
        envelope = 1.0 + 0.3 * np.sin(2 * np.pi * 0.05 * t + s)
        a_amp = sig.accel_amp[cls, s] * amp_scale[s] * envelope
        g_amp = sig.gyro_amp[cls, s] * amp_scale[s] * envelope
        wave = np.sin(phase) + 0.3 * np.sin(2 * phase + 1.0)
        accel = (gravity[s] + (a_amp * wave)[:, None] * sig.accel_axis[cls, s]
                 + rng.normal(0, spec.accel_noise_g, (n_packets, 3)))
        gyro = ((g_amp * np.cos(phase) + sig.gyro_drift[cls, s] * amp_scale[s])[:, None]
                * sig.gyro_axis[cls, s] + rng.normal(0, spec.gyro_noise_dps, (n_packets, 3)))
        rest_a = gravity[s] + rng.normal(0, spec.flat_accel_noise_g, (n_packets, 3))
        rest_g = rng.normal(0, spec.flat_gyro_noise_dps, (n_packets, 3))
        accel = np.where(moving[:, None], accel, rest_a) @ mount[s].T
        gyro = np.where(moving[:, None], gyro, rest_g) @ mount[s].T
        keep = ~_in_any(t, outages[s])
        sensors.append(make_packets(t[keep], accel[keep], gyro[keep]))

    track = None
    if spec.labeled:
        n_frames = frame_count(n_packets)
        f_start = np.arange(n_frames) * FRAME_PERIOD_S
        f_end = f_start + (FRAME_LEN - 1) / FS
        center = (f_start + f_end) / 2
        labels = classes[np.searchsorted(starts, center, side="right") - 1]
        first = np.searchsorted(starts, f_start, side="right") - 1
        last = np.searchsorted(starts, f_end, side="right") - 1
        agreed = (first == last) & (rng.random(n_frames) >= spec.agreement_noise)
        qualified = rng.random(n_frames) >= spec.p_unqualified
        qualified &= _frames_inside(f_start, f_end, playtime)
        track = LabelTrack(t0=0.0, labels=labels, agreed=agreed, qualified=qualified)

    return RawRecording(recording_id=f"{spec.id_prefix}{index:03d}", sensors=sensors,
                        playtime_intervals=playtime, label_track=track)


def _frames_inside(f_start, f_end, intervals):
    m = np.zeros(len(f_start), dtype=bool)
    for a, b in intervals:
        m |= (f_start >= a) & (f_end <= b)
    return m


def generate(spec: SynthSpec) -> list[RawRecording]:
    sig = class_signatures(spec.signature_seed)
    return [generate_recording(i, spec, sig) for i in range(spec.n_recordings)]


def oracle_stats(corpus: list[FrameTensor], dropout_frame_fraction: float = 0.20,
                 min_playtime_fraction: float = 1.0) -> dict:
    """Brute-force recount of sequences kept under each screening policy.

    Works frame by frame from the raw validity and playtime flags, without
    building sequence objects.
    """
    counts = {"none": 0, "quality": 0, "quality-playtime": 0}
    kept_ids = {"none": [], "quality": [], "quality-playtime": []}
    for ft in corpus:
        n = len(ft.frames)
        start = 0
        while start < n:
            real = 0
            dropped = 0
            play = 0
            for i in range(start, min(start + SEQ_LEN, n)):
                real += 1
                invalid = 0
                for s in range(N_SENSORS):
                    if not ft.sensor_valid[i][s]:
                        invalid += 1
                if invalid >= 2:
                    dropped += 1
                if ft.in_playtime[i]:
                    play += 1
            sid = f"{ft.recording_id}:{start}"
            counts["none"] += 1
            kept_ids["none"].append(sid)
            if dropped <= dropout_frame_fraction * real:
                counts["quality"] += 1
                kept_ids["quality"].append(sid)
                if play >= min_playtime_fraction * real:
                    counts["quality-playtime"] += 1
                    kept_ids["quality-playtime"].append(sid)
            start += SEQ_LEN
    return {"counts": counts, "kept": kept_ids}
