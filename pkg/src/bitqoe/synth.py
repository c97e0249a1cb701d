"""Synthetic bitstream datasets over the compression / packet-loss grid.

A 42 s, 720p H.264 + AMR-WB session is simulated frame by frame: video frames
at the condition's frame rate with an I-frame every 10 s, audio frames every
20 ms. Frames are packetized, packets are dropped i.i.d. at the condition's
loss rate (never during the first second), and the same per-column features as
the INRS bitstream CSV are extracted, with "Diff" columns measured against the
lossless version of the same trace.

The MOS attached to each row is a monotone *surrogate* for pipeline testing,
not subjective data.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .data import QualityDataset
from .metrics import ci95_from_scores

FPS_VALUES = (10, 15, 20, 25)
QP_VALUES = (23, 27, 31, 35)
NR_VALUES = (0, 999)
PLR_VALUES = (0.0, 0.1, 0.5, 1.0, 5.0)

DURATION_S = 42.0
I_FRAME_PERIOD_S = 10.0
AUDIO_FRAME_S = 0.02
LOSS_START_S = 1.0
HORIZON_S = 31  # per-second columns S0..S30
WIDTH, HEIGHT = 1280, 720
VIDEO_TIMEBASE = 90_000
AUDIO_SAMPLE_RATE = 16_000
AUDIO_BITRATE = 24_000
PACKET_PAYLOAD = 1200  # bytes per RTP payload

# lossless reference means at qp 23, 25 fps, before qp scaling
I_FRAME_MEAN_BYTES = 60_000.0
P_FRAME_MEAN_BYTES = 5_000.0
FRAME_SIZE_SIGMA = 0.15
NR_SIZE_FACTOR = 0.9  # noise reduction on: ~10% smaller frames
CONTENT_COMPLEXITY = 1.0  # single-content corpus; scene complexity is not computed

MOS_LABEL = "synthetic-surrogate"
OBSERVERS = 30


def feature_names() -> list[str]:
    """The 125 bitstream feature columns in canonical order."""
    names = [
        "VideoFrameRate", "NoiseReduction", "QuantizationParameter",
        "VideoPacketLossRate", "AudioPacketLossRate", "VideoStartPTS",
        "VideoDurationTS", "VideoBitRate", "VideoNBFrames", "AudioDurationTS",
        "AudioDuration", "AudioBitRate", "AudioNBFrames", "VideoBitsPerPixelFrame",
        "iFramesPerScene", "ContentComplexity", "iFrameCount", "pFrameCount",
        "aFrameCount", "iFrameCountDiff", "pFrameCountDiff", "aFrameCountDiff",
    ]
    names += [f"iFrame{i}Size" for i in range(5)]
    names += [f"iFrame{i}SizeDiff" for i in range(5)]
    names += [f"S{s}pFrameCountDiff" for s in range(HORIZON_S)]
    names += [f"S{s}pFrameMeanDiff" for s in range(HORIZON_S)]
    names += [f"S{s}aFrameCountDiff" for s in range(HORIZON_S)]
    return names


FEATURE_NAMES = tuple(feature_names())
PLR_FEATURES = ("VideoPacketLossRate", "AudioPacketLossRate")


@dataclass(frozen=True)
class StreamCondition:
    fps: int
    qp: int
    nr: int
    video_plr: float
    audio_plr: float
    extended: bool = False

    def __post_init__(self):
        if self.extended:
            if self.fps <= 0 or not 0 <= self.video_plr <= 100 or not 0 <= self.audio_plr <= 100:
                raise ValueError(f"invalid condition {self}")
            return
        for value, allowed, name in ((self.fps, FPS_VALUES, "fps"),
                                     (self.qp, QP_VALUES, "qp"),
                                     (self.nr, NR_VALUES, "nr"),
                                     (self.video_plr, PLR_VALUES, "video_plr"),
                                     (self.audio_plr, PLR_VALUES, "audio_plr")):
            if value not in allowed:
                raise ValueError(f"{name}={value} not in {allowed} "
                                 "(set extended=True for free-form values)")


@dataclass(frozen=True)
class Grid:
    fps: tuple = FPS_VALUES
    qp: tuple = QP_VALUES
    nr: tuple = NR_VALUES
    plr: tuple = PLR_VALUES
    extended: bool = False


FULL_GRID = Grid()
TINY_GRID = Grid(fps=(10, 25), qp=(23, 35), nr=(0,))


def enumerate_conditions(grid: Grid = FULL_GRID) -> list[StreamCondition]:
    """Cartesian grid; audio loss is paired with video loss."""
    return [StreamCondition(f, q, n, p, p, grid.extended)
            for f, q, n, p in itertools.product(grid.fps, grid.qp, grid.nr, grid.plr)]


@dataclass(frozen=True, eq=False)
class FrameTrace:
    """Per-frame records as parallel arrays. ``kind`` holds ``b"I"``, ``b"P"`` or ``b"A"``."""

    kind: np.ndarray
    timestamp: np.ndarray
    size: np.ndarray
    received: np.ndarray  # bytes of the frame that arrived
    lost: np.ndarray  # at least one packet of the frame was dropped
    duration: float = DURATION_S
    video_bitrate: float = 0.0
    audio_bitrate: float = AUDIO_BITRATE
    meta: dict = field(default_factory=dict)

    def select(self, kind: bytes) -> np.ndarray:
        return self.kind == kind

    def lossless(self) -> "FrameTrace":
        return FrameTrace(self.kind, self.timestamp, self.size, self.size.copy(),
                          np.zeros_like(self.lost), self.duration,
                          self.video_bitrate, self.audio_bitrate, dict(self.meta))


def _size_scale(c: StreamCondition) -> float:
    s = 2.0 ** ((23 - c.qp) / 6.0)
    if c.nr:
        s *= NR_SIZE_FACTOR
    return s


def simulate_transmission(c: StreamCondition, seed, duration: float = DURATION_S,
                          lossless: bool = False) -> FrameTrace:
    """Simulate one session.

    Frame sizes and per-packet loss draws come from separate streams keyed only
    by ``seed``, so conditions that differ in loss rate alone share sizes and
    loss uniforms (common random numbers): a higher loss rate loses a superset
    of packets.
    """
    n_video = int(round(c.fps * duration))
    t_video = np.arange(n_video) / c.fps
    gop = int(round(c.fps * I_FRAME_PERIOD_S))
    is_i = (np.arange(n_video) % gop) == 0
    n_audio = int(round(duration / AUDIO_FRAME_S))
    t_audio = np.arange(n_audio) * AUDIO_FRAME_S

    size_rng = np.random.default_rng([int(seed), 1])
    loss_rng = np.random.default_rng([int(seed), 2])
    scale = _size_scale(c)
    # lower frame rates spend more bits per P-frame
    p_mean = P_FRAME_MEAN_BYTES * scale * (25.0 / c.fps) ** 0.5
    i_mean = I_FRAME_MEAN_BYTES * scale
    z = size_rng.standard_normal(n_video)
    mu = np.where(is_i, i_mean, p_mean)
    vsize = np.maximum(1.0, np.round(mu * np.exp(FRAME_SIZE_SIGMA * z - FRAME_SIZE_SIGMA ** 2 / 2)))
    asize = np.full(n_audio, AUDIO_BITRATE * AUDIO_FRAME_S / 8.0)

    kind = np.concatenate([np.where(is_i, b"I", b"P").astype("S1"),
                           np.full(n_audio, b"A", dtype="S1")])
    ts = np.concatenate([t_video, t_audio])
    size = np.concatenate([vsize, asize])
    plr = np.concatenate([np.full(n_video, c.video_plr), np.full(n_audio, c.audio_plr)]) / 100.0

    n_pk = np.maximum(1, np.ceil(size / PACKET_PAYLOAD)).astype(np.int64)
    u = loss_rng.random(int(n_pk.sum()))
    frame_of = np.repeat(np.arange(size.size), n_pk)
    pk_bytes = np.full(u.size, float(PACKET_PAYLOAD))
    last = np.cumsum(n_pk) - 1
    pk_bytes[last] = size - (n_pk - 1) * PACKET_PAYLOAD
    dropped = (u < plr[frame_of]) & (ts[frame_of] >= LOSS_START_S)
    if lossless:
        dropped[:] = False
    lost_bytes = np.bincount(frame_of, weights=pk_bytes * dropped, minlength=size.size)
    lost = np.bincount(frame_of, weights=dropped, minlength=size.size) > 0

    order = np.argsort(ts, kind="stable")
    video_bits = 8.0 * vsize.sum()
    return FrameTrace(kind[order], ts[order], size[order],
                      (size - lost_bytes)[order], lost[order], duration,
                      video_bits / duration, AUDIO_BITRATE,
                      {"fps": c.fps, "seed": int(seed)})


def _pct_deficit(received, reference) -> float:
    if reference <= 0:
        return 0.0
    return float(min(100.0, max(0.0, 100.0 * (1.0 - received / reference))))


def extract_features(trace: FrameTrace, c: StreamCondition) -> np.ndarray:
    """Feature vector in :data:`FEATURE_NAMES` order."""
    if trace.duration < HORIZON_S:
        raise ValueError(f"trace of {trace.duration} s is shorter than the {HORIZON_S} s horizon")
    ref = trace.lossless()
    ok = ~trace.lost
    is_i, is_p, is_a = trace.select(b"I"), trace.select(b"P"), trace.select(b"A")
    is_v = is_i | is_p

    n_i_ref, n_p_ref, n_a_ref = int(is_i.sum()), int(is_p.sum()), int(is_a.sum())
    n_i, n_p, n_a = int((is_i & ok).sum()), int((is_p & ok).sum()), int((is_a & ok).sum())
    v_bytes = float(trace.received[is_v].sum())
    a_bytes = float(trace.received[is_a].sum())
    video_bitrate = 8.0 * v_bytes / trace.duration
    audio_bitrate = 8.0 * a_bytes / trace.duration
    v_ok_ts = trace.timestamp[is_v & ok]
    start_pts = float(round(v_ok_ts.min() * VIDEO_TIMEBASE)) if v_ok_ts.size else 0.0

    row = [
        float(c.fps), float(c.nr), float(c.qp), float(c.video_plr), float(c.audio_plr),
        start_pts,
        float(round(trace.duration * VIDEO_TIMEBASE)),
        video_bitrate,
        float(n_i + n_p),
        float(round(trace.duration * AUDIO_SAMPLE_RATE)),
        trace.duration,
        audio_bitrate,
        float(n_a),
        video_bitrate / (WIDTH * HEIGHT * c.fps),
        float(n_i_ref),
        CONTENT_COMPLEXITY,
        float(n_i), float(n_p), float(n_a),
        _pct_deficit(n_i, n_i_ref), _pct_deficit(n_p, n_p_ref), _pct_deficit(n_a, n_a_ref),
    ]
    i_recv = trace.received[is_i]
    i_ref = ref.received[is_i]
    i_sizes = [float(i_recv[k]) if k < i_recv.size else 0.0 for k in range(5)]
    i_diffs = [_pct_deficit(i_recv[k], i_ref[k]) if k < i_recv.size else 100.0 for k in range(5)]
    row += i_sizes + i_diffs

    sec = np.floor(trace.timestamp + 1e-9).astype(np.int64)
    p_cnt, p_mean, a_cnt = [], [], []
    for s in range(HORIZON_S):
        in_s = sec == s
        ps = in_s & is_p
        as_ = in_s & is_a
        p_cnt.append(_pct_deficit((ps & ok).sum(), ps.sum()))
        # mean received P-frame bytes over the reference frame count
        p_mean.append(_pct_deficit(trace.received[ps].sum(), ref.received[ps].sum()))
        a_cnt.append(_pct_deficit((as_ & ok).sum(), as_.sum()))
    row += p_cnt + p_mean + a_cnt
    return np.asarray(row, dtype=np.float64)


def loss_dependent_features(seeds=range(5), plr: float = 5.0) -> frozenset[str]:
    """Columns whose value is driven by packet loss.

    The nominal loss-rate columns plus every column that changes between a
    lossy trace and its lossless twin for any of ``seeds``.
    """
    c = StreamCondition(25, 23, 0, plr, plr, extended=plr not in PLR_VALUES)
    changed = set(PLR_FEATURES)
    for seed in seeds:
        trace = simulate_transmission(c, seed)
        lossy = extract_features(trace, c)
        clean = extract_features(trace.lossless(), c)
        changed |= {n for n, a, b in zip(FEATURE_NAMES, lossy, clean) if a != b}
    return frozenset(changed)


def surrogate_mos(c: StreamCondition) -> float:
    """Noise-free surrogate: falls with loss and qp, rises with frame rate."""
    loss = 2.3 * (1.0 - math.exp(-c.video_plr / 1.5)) + 0.2 * (1.0 - math.exp(-c.audio_plr / 1.5))
    q = 4.3 - 0.05 * (c.qp - 23) + 0.025 * (c.fps - 10) - loss
    return min(5.0, max(1.0, q))


def synth_mos(c: StreamCondition, noise_seed, noise: float = 0.1) -> float:
    eps = 0.0 if noise == 0 else float(
        np.random.default_rng([int(noise_seed), 3]).uniform(-noise, noise))
    return min(5.0, max(1.0, surrogate_mos(c) + eps))


def _observer_ci(mos: float, seed) -> float:
    votes = np.clip(np.rint(mos + np.random.default_rng([int(seed), 4]).normal(0, 0.8, OBSERVERS)), 1, 5)
    return ci95_from_scores(votes)


def generate_dataset(grid: Grid = FULL_GRID, seed: int = 0) -> QualityDataset:
    """One row per grid condition; CI95 comes from 30 simulated ACR votes."""
    conds = enumerate_conditions(grid)
    rows, mos, ci = [], [], []
    ss = np.random.SeedSequence(int(seed))
    child_seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(len(conds))]
    for c, cs in zip(conds, child_seeds):
        # size/loss stream keyed by (seed, fps, qp, nr) so loss-only neighbours share it
        trace_seed = int(np.random.SeedSequence([int(seed), c.fps, c.qp, c.nr]).generate_state(1)[0])
        rows.append(extract_features(simulate_transmission(c, trace_seed), c))
        m = synth_mos(c, cs)
        mos.append(m)
        ci.append(_observer_ci(m, cs))
    return QualityDataset(FEATURE_NAMES, np.array(rows), np.array(mos), np.array(ci),
                          {"source": "synthetic", "mos": MOS_LABEL, "seed": int(seed)})
