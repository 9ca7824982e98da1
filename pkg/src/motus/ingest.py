"""Raw recording parsing and signal preprocessing.

Pipeline per recording: linear interpolation of each sensor's packet stream
onto a shared 52 Hz grid, gyroscope bias removal, a 7-tap median filter and
windowing into 120-sample frames with a 60-sample hop.

Channel layout of merged signals and frames is sensor-major::

    [s0.ax, s0.ay, s0.az, s0.gx, s0.gy, s0.gz, s1.ax, ..., s3.gz]
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FS = 52.0
FRAME_LEN = 120
HOP = 60
N_SENSORS = 4
N_CHANNELS = 6
FRAME_PERIOD_S = HOP / FS
VALID_FRACTION = 0.9
DEFAULT_GAP_S = 0.5

RAW_MAGIC = b"MSSL"
RAW_VERSION = 1
FRAMES_MAGIC = b"MSFT"
FRAMES_VERSION = 1

PACKET_DTYPE = np.dtype([("t", "<f8"), ("accel", "<f4", (3,)), ("gyro", "<f4", (3,))])


class IngestError(ValueError):
    pass


@dataclass
class LabelTrack:
    """Per-frame annotations on a frame grid anchored at ``t0``.

    Label ``j`` describes the frame starting at ``t0 + j * hop_s``.
    """

    t0: float
    labels: np.ndarray  # int, class id 0..8
    agreed: np.ndarray  # bool, all annotators agree
    qualified: np.ndarray  # bool, frame usable for training/testing
    hop_s: float = FRAME_PERIOD_S

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.agreed = np.asarray(self.agreed, dtype=bool)
        self.qualified = np.asarray(self.qualified, dtype=bool)
        n = len(self.labels)
        if len(self.agreed) != n or len(self.qualified) != n:
            raise IngestError("label track arrays differ in length")


@dataclass
class RawRecording:
    recording_id: str
    sensors: list[np.ndarray]  # 4 structured arrays of PACKET_DTYPE
    playtime_intervals: list[tuple[float, float]] = field(default_factory=list)
    label_track: LabelTrack | None = None

    def __post_init__(self):
        if len(self.sensors) != N_SENSORS:
            raise IngestError(f"expected {N_SENSORS} sensor streams, got {len(self.sensors)}")
        self.sensors = [np.asarray(s, dtype=PACKET_DTYPE) for s in self.sensors]
        for i, s in enumerate(self.sensors):
            if len(s) > 1 and not np.all(np.diff(s["t"]) > 0):
                raise IngestError(f"sensor {i}: timestamps not strictly increasing")
        ivs = sorted((float(a), float(b)) for a, b in self.playtime_intervals)
        for a, b in ivs:
            if not a < b:
                raise IngestError(f"playtime interval ({a}, {b}) has start >= end")
        for (_, b0), (a1, _) in zip(ivs, ivs[1:]):
            if a1 < b0:
                raise IngestError("playtime intervals overlap")
        self.playtime_intervals = ivs


def make_packets(t, accel, gyro) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros(len(t), dtype=PACKET_DTYPE)
    out["t"] = t
    out["accel"] = np.asarray(accel, dtype=np.float32).reshape(len(t), 3)
    out["gyro"] = np.asarray(gyro, dtype=np.float32).reshape(len(t), 3)
    return out


@dataclass
class FrameTensor:
    frames: np.ndarray  # (N, 120, 24) float32
    t0: float  # start second of frame 0
    sensor_valid: np.ndarray  # (N, 4) bool
    recording_id: str
    in_playtime: np.ndarray | None = None  # (N,) bool
    labels: np.ndarray | None = None  # (N,) int, -1 where unknown
    agreed: np.ndarray | None = None
    qualified: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.frames)
        if self.in_playtime is None:
            self.in_playtime = np.zeros(n, dtype=bool)

    def __len__(self):
        return len(self.frames)

    @property
    def frame_times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.frames)) * FRAME_PERIOD_S

    @property
    def has_labels(self) -> bool:
        return self.labels is not None


@dataclass
class GridSignal:
    t0: float
    signals: list[np.ndarray]  # per sensor (M, 6) float64
    valid: list[np.ndarray]  # per sensor (M,) bool

    @property
    def n_samples(self) -> int:
        return len(self.valid[0])


# --------------------------------------------------------------------------
# signal operations
# --------------------------------------------------------------------------

def interpolate_to_grid(rec: RawRecording, gap_threshold: float = DEFAULT_GAP_S) -> GridSignal:
    """Resample every sensor onto one 52 Hz grid spanning all sensors.

    Grid samples outside a sensor's packet coverage, or inside a packet gap
    longer than ``gap_threshold`` seconds, are invalid and set to 0.
    """
    nonempty = [s for s in rec.sensors if len(s)]
    if not nonempty:
        raise IngestError("no data")
    t_start = min(float(s["t"][0]) for s in nonempty)
    t_end = max(float(s["t"][-1]) for s in nonempty)
    m = int(np.floor((t_end - t_start) * FS + 1e-6)) + 1
    grid = t_start + np.arange(m) / FS
    tol = 1e-9

    signals, valid = [], []
    for s in rec.sensors:
        sig = np.zeros((m, N_CHANNELS))
        ok = np.zeros(m, dtype=bool)
        if len(s) >= 2:
            ts = s["t"]
            values = np.concatenate([s["accel"], s["gyro"]], axis=1).astype(np.float64)
            covered = (grid >= ts[0] - tol) & (grid <= ts[-1] + tol)
            left = np.clip(np.searchsorted(ts, grid + tol, side="right") - 1, 0, len(ts) - 2)
            on_packet = np.abs(ts[left] - grid) <= tol
            on_packet |= np.abs(ts[left + 1] - grid) <= tol
            short_gap = (ts[left + 1] - ts[left]) <= gap_threshold + tol
            ok = covered & (on_packet | short_gap)
            for c in range(N_CHANNELS):
                sig[:, c] = np.interp(grid, ts, values[:, c])
            sig[~ok] = 0.0
        signals.append(sig)
        valid.append(ok)
    return GridSignal(t0=t_start, signals=signals, valid=valid)


def remove_gyro_bias(signal: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Subtract each gyro channel's median over valid samples."""
    out = np.array(signal, dtype=np.float64, copy=True)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        return out
    for c in range(3, 6):
        out[valid, c] -= np.median(out[valid, c])
    return out


def median_filter7(signal: np.ndarray) -> np.ndarray:
    """Seven-tap sliding median per channel with replicate edge padding."""
    x = np.asarray(signal, dtype=np.float64)
    padded = np.pad(x, ((3, 3), (0, 0)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, 7, axis=0)
    return np.median(windows, axis=-1)


def frame_count(m: int) -> int:
    return (m - FRAME_LEN) // HOP + 1 if m >= FRAME_LEN else 0


def window_frames(signal: np.ndarray, valid: np.ndarray, t0: float = 0.0,
                  recording_id: str = "") -> FrameTensor:
    """Cut a merged (M, 24) signal into 120-sample frames at a 60-sample hop.

    ``valid`` is (M, 4) per-sensor sample validity; a sensor is valid in a
    frame when at least 90% of its samples there are valid.
    """
    signal = np.asarray(signal)
    valid = np.asarray(valid, dtype=bool)
    n = frame_count(len(signal))
    if n == 0:
        return FrameTensor(
            frames=np.zeros((0, FRAME_LEN, N_SENSORS * N_CHANNELS), np.float32),
            t0=t0, sensor_valid=np.zeros((0, N_SENSORS), bool), recording_id=recording_id)
    starts = np.arange(n) * HOP
    idx = starts[:, None] + np.arange(FRAME_LEN)[None, :]
    frames = signal[idx].astype(np.float32)
    frac = valid[idx].mean(axis=1)
    return FrameTensor(frames=frames, t0=t0, sensor_valid=frac >= VALID_FRACTION,
                       recording_id=recording_id)


def _playtime_flags(frame_times: np.ndarray, intervals) -> np.ndarray:
    flags = np.zeros(len(frame_times), dtype=bool)
    last = frame_times + (FRAME_LEN - 1) / FS
    for a, b in intervals:
        flags |= (frame_times >= a - 1e-9) & (last <= b + 1e-9)
    return flags


def _attach_labels(ft: FrameTensor, track: LabelTrack) -> None:
    n = len(ft)
    j = np.rint((ft.frame_times - track.t0) / track.hop_s).astype(np.int64)
    inside = (j >= 0) & (j < len(track.labels))
    jj = np.where(inside, j, 0)
    ft.labels = np.where(inside, track.labels[jj], -1) if n else np.zeros(0, np.int64)
    ft.agreed = inside & track.agreed[jj] if n else np.zeros(0, bool)
    ft.qualified = inside & track.qualified[jj] if n else np.zeros(0, bool)


def preprocess(rec: RawRecording, gap_threshold: float = DEFAULT_GAP_S) -> FrameTensor:
    grid = interpolate_to_grid(rec, gap_threshold)
    cleaned = [median_filter7(remove_gyro_bias(sig, ok))
               for sig, ok in zip(grid.signals, grid.valid)]
    merged = np.concatenate(cleaned, axis=1)
    valid = np.stack(grid.valid, axis=1)
    ft = window_frames(merged, valid, t0=grid.t0, recording_id=rec.recording_id)
    ft.in_playtime = _playtime_flags(ft.frame_times, rec.playtime_intervals)
    if rec.label_track is not None:
        _attach_labels(ft, rec.label_track)
    return ft


# --------------------------------------------------------------------------
# file formats (little-endian)
# --------------------------------------------------------------------------

def _write_str(f, s: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _read_str(f) -> str:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n).decode("utf-8")


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise IngestError("unexpected end of file")
    return b


def dump_raw(rec: RawRecording) -> bytes:
    """Serialize a recording.

    Layout: magic ``MSSL``, u16 version, u16 sensor count, recording id,
    u32 playtime count + (f64 start, f64 end) pairs, u8 has-labels flag
    [+ f64 t0, f64 hop, u32 n, u8 labels, u8 agreed, u8 qualified], then per
    sensor u32 packet count + packets of (f64 t, 3 f32 accel, 3 f32 gyro).
    """
    f = io.BytesIO()
    f.write(RAW_MAGIC)
    f.write(struct.pack("<HH", RAW_VERSION, N_SENSORS))
    _write_str(f, rec.recording_id)
    f.write(struct.pack("<I", len(rec.playtime_intervals)))
    for a, b in rec.playtime_intervals:
        f.write(struct.pack("<dd", a, b))
    lt = rec.label_track
    f.write(struct.pack("<B", lt is not None))
    if lt is not None:
        f.write(struct.pack("<ddI", lt.t0, lt.hop_s, len(lt.labels)))
        f.write(lt.labels.astype("<u1").tobytes())
        f.write(lt.agreed.astype("<u1").tobytes())
        f.write(lt.qualified.astype("<u1").tobytes())
    for s in rec.sensors:
        f.write(struct.pack("<I", len(s)))
        f.write(s.astype(PACKET_DTYPE).tobytes())
    return f.getvalue()


def load_raw(data: bytes) -> RawRecording:
    f = io.BytesIO(data)
    if _read_exact(f, 4) != RAW_MAGIC:
        raise IngestError("not a raw recording (bad magic)")
    version, n_sensors = struct.unpack("<HH", _read_exact(f, 4))
    if version != RAW_VERSION:
        raise IngestError(f"unsupported raw format version {version}")
    rid = _read_str(f)
    (n_iv,) = struct.unpack("<I", _read_exact(f, 4))
    ivs = [struct.unpack("<dd", _read_exact(f, 16)) for _ in range(n_iv)]
    (has_labels,) = struct.unpack("<B", _read_exact(f, 1))
    track = None
    if has_labels:
        t0, hop, n = struct.unpack("<ddI", _read_exact(f, 20))
        labels = np.frombuffer(_read_exact(f, n), "<u1")
        agreed = np.frombuffer(_read_exact(f, n), "<u1").astype(bool)
        qualified = np.frombuffer(_read_exact(f, n), "<u1").astype(bool)
        track = LabelTrack(t0=t0, labels=labels, agreed=agreed, qualified=qualified, hop_s=hop)
    sensors = []
    for _ in range(n_sensors):
        (n,) = struct.unpack("<I", _read_exact(f, 4))
        buf = _read_exact(f, n * PACKET_DTYPE.itemsize)
        sensors.append(np.frombuffer(buf, PACKET_DTYPE).copy())
    return RawRecording(recording_id=rid, sensors=sensors, playtime_intervals=ivs,
                        label_track=track)


def dump_frames(ft: FrameTensor) -> bytes:
    """Serialize a FrameTensor.

    Layout: magic ``MSFT``, u16 version, u32 N, u32 120, u32 24, recording
    id, f64 t0, f32 frames row-major, packed sensor_valid bits (N*4),
    packed in_playtime bits (N), u8 has-labels [+ i8 labels, packed agreed,
    packed qualified].
    """
    f = io.BytesIO()
    n, length, channels = ft.frames.shape
    f.write(FRAMES_MAGIC)
    f.write(struct.pack("<HIII", FRAMES_VERSION, n, length, channels))
    _write_str(f, ft.recording_id)
    f.write(struct.pack("<d", ft.t0))
    f.write(np.ascontiguousarray(ft.frames, dtype="<f4").tobytes())
    f.write(np.packbits(ft.sensor_valid.astype(bool).ravel(), bitorder="little").tobytes())
    f.write(np.packbits(ft.in_playtime.astype(bool), bitorder="little").tobytes())
    f.write(struct.pack("<B", ft.has_labels))
    if ft.has_labels:
        f.write(ft.labels.astype("<i1").tobytes())
        f.write(np.packbits(ft.agreed.astype(bool), bitorder="little").tobytes())
        f.write(np.packbits(ft.qualified.astype(bool), bitorder="little").tobytes())
    return f.getvalue()


def _unpack_bits(f, count: int) -> np.ndarray:
    nbytes = (count + 7) // 8
    bits = np.unpackbits(np.frombuffer(_read_exact(f, nbytes), np.uint8), bitorder="little")
    return bits[:count].astype(bool)


def load_frames(data: bytes) -> FrameTensor:
    f = io.BytesIO(data)
    if _read_exact(f, 4) != FRAMES_MAGIC:
        raise IngestError("not a frame tensor (bad magic)")
    version, n, length, channels = struct.unpack("<HIII", _read_exact(f, 14))
    if version != FRAMES_VERSION:
        raise IngestError(f"unsupported frame format version {version}")
    rid = _read_str(f)
    (t0,) = struct.unpack("<d", _read_exact(f, 8))
    count = n * length * channels
    frames = np.frombuffer(_read_exact(f, 4 * count), "<f4").reshape(n, length, channels).copy()
    sensor_valid = _unpack_bits(f, n * N_SENSORS).reshape(n, N_SENSORS)
    in_playtime = _unpack_bits(f, n)
    (has_labels,) = struct.unpack("<B", _read_exact(f, 1))
    ft = FrameTensor(frames=frames, t0=t0, sensor_valid=sensor_valid, recording_id=rid,
                     in_playtime=in_playtime)
    if has_labels:
        ft.labels = np.frombuffer(_read_exact(f, n), "<i1").astype(np.int64)
        ft.agreed = _unpack_bits(f, n)
        ft.qualified = _unpack_bits(f, n)
    return ft


def read_raw(path) -> RawRecording:
    return load_raw(Path(path).read_bytes())


def write_raw(path, rec: RawRecording) -> None:
    Path(path).write_bytes(dump_raw(rec))


def read_frames(path) -> FrameTensor:
    return load_frames(Path(path).read_bytes())


def write_frames(path, ft: FrameTensor) -> None:
    Path(path).write_bytes(dump_frames(ft))


def load_frame_dir(directory) -> list[FrameTensor]:
    return [read_frames(p) for p in sorted(Path(directory).glob("*.msft"))]
