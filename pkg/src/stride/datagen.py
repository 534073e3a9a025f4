"""Synthetic stereo stair-approach clips, frame/label processing, and the dataset file.

Scene model (left channel; image x runs anterior, rows run downward):

* the foot is a textured block on rows ``FOOT_ROW..24``, columns
  ``FOOT_X0 .. FOOT_X0 + FOOT_PX``;
* the stair tread is a bright band ``BAND_ROWS`` tall spanning from its
  edge column ``x_edge`` to the right border, with its lower boundary
  ``gap`` pixels above the foot;
* ``k`` frames before impact, ``gap = g * k`` and ``x_edge = x_land + s * k``
  with the descent rate ``g`` and lateral drift ``s`` constant per trial. At
  and after impact ``gap = 0`` and ``x_edge = x_land``.

``x_land``, ``g`` and ``s`` sit on a 1/8-pixel grid and the band is drawn with
exact area coverage at an amplitude of 192 grey levels, so every coverage
fraction (a multiple of 1/64) lands on an integer grey level. That is what
lets :func:`invert_window` and :func:`invert_trial` recover the labels from
noise-free frames exactly.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ChecksumError, InvariantError, TruncatedError, VersionError
from .numerics import Rng, derive_seed

FPS = 60.0
N_FRAMES = 100
FRAME_SHAPE = (2, 25, 50)
WINDOW = 15
MIN_IMPACT = 2 * WINDOW

FOOT_ROW = 19
FOOT_X0 = 9
FOOT_PX = 32
FOOT_CENTER = FOOT_X0 + FOOT_PX / 2
FOOT_DISPARITY = 3
BAND_ROWS = 3
BACKGROUND = 30
BAND_AMP = 192
FOOT_LEVEL = 104

SPEEDS = ("slow", "medium", "fast")
STRIKES = ("rear", "mid", "fore")
SPEED_MM_S = {"slow": 1000.0, "medium": 1250.0, "fast": 1500.0}
# cop_norm ranges for each instructed strike, in units of 1/256 of the foot
STRIKE_RANGE = {"rear": (-115, -39), "mid": (-38, 38), "fore": (39, 115)}

IMPACT_RANGE = (40, 70)
TOE_WINDOW = (15, 3)  # frames before impact, inclusive
SWING_BASE_MM_S = 2000.0
SWING_SLOPE_MM_S2 = 4000.0
SWING_VERTICAL_MM_S = 800.0


def _f32(x) -> float:
    return float(np.float32(x))


def _q8(x: float) -> float:
    return round(x * 8.0) / 8.0


@dataclass
class SubjectProfile:
    subject_id: int
    insole_mm: float
    cadence: float = 1.0
    swing_scale: float = 1.0
    jitter_px: int = 1
    pixel_noise: float = 4.0
    cop_noise: float = 0.03
    drift_sd: float = 0.15
    velocity_jitter: float = 0.06
    noise_seed: int = 0

    def __post_init__(self):
        if self.insole_mm <= 0:
            raise ValueError(f"insole length must be positive, got {self.insole_mm}")
        for name in ("insole_mm", "cadence", "swing_scale", "pixel_noise", "cop_noise", "drift_sd", "velocity_jitter"):
            setattr(self, name, _f32(getattr(self, name)))
        self.jitter_px = int(self.jitter_px)

    def noiseless(self) -> "SubjectProfile":
        """Same persona with pixel noise, jitter, label noise and velocity jitter removed."""
        return SubjectProfile(
            self.subject_id, self.insole_mm, self.cadence, self.swing_scale,
            jitter_px=0, pixel_noise=0.0, cop_noise=0.0, drift_sd=self.drift_sd,
            velocity_jitter=0.0, noise_seed=self.noise_seed,
        )


def random_profile(subject_id: int, seed: int) -> SubjectProfile:
    rng = Rng(derive_seed("persona", seed, subject_id))
    u = rng.uniform(7)
    return SubjectProfile(
        subject_id=subject_id,
        insole_mm=240.0 + 50.0 * u[0],
        cadence=0.85 + 0.3 * u[1],
        swing_scale=0.8 + 0.4 * u[2],
        jitter_px=1,
        pixel_noise=2.0 + 4.0 * u[3],
        cop_noise=0.015 + 0.03 * u[4],
        drift_sd=0.08 + 0.14 * u[5],
        velocity_jitter=0.05,
        noise_seed=int(rng.integers(0, 2**31)),
    )


@dataclass
class Trial:
    subject_id: int
    frames: np.ndarray  # uint8 (n_frames, 2, 25, 50)
    impact_idx: int
    cop_norm: float
    torso_velocity: float
    toe_velocity: float
    speed: str
    strike: str
    trial_id: int = 0

    def __post_init__(self):
        self.cop_norm = _f32(self.cop_norm)
        self.torso_velocity = _f32(self.torso_velocity)
        self.toe_velocity = _f32(self.toe_velocity)

    def check(self) -> None:
        if self.impact_idx < MIN_IMPACT:
            raise InvariantError(f"impact_idx {self.impact_idx} < {MIN_IMPACT}")
        if self.impact_idx > self.frames.shape[0]:
            raise InvariantError(f"impact_idx {self.impact_idx} beyond {self.frames.shape[0]} frames")
        if not -0.5 <= self.cop_norm <= 0.5:
            raise InvariantError(f"cop_norm {self.cop_norm} outside [-0.5, 0.5]")
        if self.torso_velocity <= 0 or self.toe_velocity <= 0:
            raise InvariantError("velocities must be positive")
        if self.speed not in SPEEDS or self.strike not in STRIKES:
            raise InvariantError(f"unknown category {self.speed}/{self.strike}")

    def same_as(self, other: "Trial") -> bool:
        return (
            self.subject_id == other.subject_id
            and self.impact_idx == other.impact_idx
            and self.cop_norm == other.cop_norm
            and self.torso_velocity == other.torso_velocity
            and self.toe_velocity == other.toe_velocity
            and self.speed == other.speed
            and self.strike == other.strike
            and np.array_equal(self.frames, other.frames)
        )


@dataclass
class Dataset:
    profiles: list
    trials: list
    seed: int = 0
    version: int = 1

    def profile(self, subject_id: int) -> SubjectProfile:
        for p in self.profiles:
            if p.subject_id == subject_id:
                return p
        raise KeyError(subject_id)

    def subject_trials(self, subject_id: int) -> list:
        return [t for t in self.trials if t.subject_id == subject_id]

    def subject_ids(self) -> list:
        return [p.subject_id for p in self.profiles]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.version == other.version
            and self.profiles == other.profiles
            and len(self.trials) == len(other.trials)
            and all(a.same_as(b) and a.trial_id == b.trial_id for a, b in zip(self.trials, other.trials))
        )


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------


def toe_speed(torso_mm_s: float, swing: float, tau_s) -> np.ndarray:
    """Toe speed (mm/s) ``tau_s`` seconds before impact in the final swing."""
    tau = np.asarray(tau_s, dtype=np.float64)
    horizontal = torso_mm_s + swing * (SWING_BASE_MM_S + SWING_SLOPE_MM_S2 * tau)
    vertical = swing * SWING_VERTICAL_MM_S
    return np.sqrt(horizontal * horizontal + vertical * vertical)


def mean_toe_velocity(torso_mm_s: float, swing: float) -> float:
    lo, hi = TOE_WINDOW[1], TOE_WINDOW[0]
    k = np.arange(lo, hi + 1)
    return float(np.mean(toe_speed(torso_mm_s, swing, k / FPS)))


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _interval_coverage(lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    """Overlap of each unit cell ``[i, i+1)`` with ``[lo, hi)``; shape (len(lo), n)."""
    cells = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(hi[:, None], cells + 1) - np.maximum(lo[:, None], cells), 0.0, 1.0)


def _foot_layer(shift: int) -> tuple[np.ndarray, np.ndarray]:
    _, h, w = FRAME_SHAPE
    mask = np.zeros((h, w), bool)
    x0 = FOOT_X0 - shift
    mask[FOOT_ROW:, max(x0, 0) : x0 + FOOT_PX] = True
    rows, cols = np.mgrid[0:h, 0:w]
    texture = FOOT_LEVEL + 16 * (((rows + cols + shift) % 4) == 0)
    return mask, texture.astype(np.float64)


def render_scene(gaps: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Noise-free stereo frames (T, 2, 25, 50) as float64 grey levels."""
    _, h, w = FRAME_SHAPE
    gaps = np.asarray(gaps, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    bottom = FOOT_ROW - gaps
    cy = _interval_coverage(bottom - BAND_ROWS, bottom, h)
    out = np.empty((len(gaps), 2, h, w))
    for ch in range(2):
        if ch == 0:
            shift = np.zeros_like(gaps)
            foot_shift = 0
        else:
            # farther band (larger gap) gets a smaller disparity
            shift = np.maximum(FOOT_DISPARITY - np.floor(gaps / 6.0), 0.0)
            foot_shift = FOOT_DISPARITY
        cx = _interval_coverage(edges - shift, np.full_like(edges, float(w)), w)
        img = BACKGROUND + BAND_AMP * cy[:, :, None] * cx[:, None, :]
        mask, tex = _foot_layer(foot_shift)
        img[:, mask] = tex[mask]
        out[:, ch] = img
    return out


def _shift_frame(img: np.ndarray, dy: int, dx: int, fill: float) -> np.ndarray:
    out = np.full_like(img, fill)
    _, h, w = img.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[:, yd, xd] = img[:, ys, xs]
    return out


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def generate_trial(
    profile: SubjectProfile,
    speed: str,
    strike: str,
    seed: int,
    landing: float | None = None,
    impact_idx: int | None = None,
    n_frames: int = N_FRAMES,
) -> Trial:
    """Render one clip.

    ``landing`` forces the noise-free cop_norm (snapped to the 1/256 grid);
    otherwise it is drawn uniformly within the strike category.
    """
    if speed not in SPEEDS:
        raise ValueError(f"unknown speed category {speed!r}")
    if strike not in STRIKES:
        raise ValueError(f"unknown strike category {strike!r}")
    rng = Rng(derive_seed("trial", seed))
    noise_rng = Rng(derive_seed("noise", seed, profile.noise_seed))

    torso = SPEED_MM_S[speed] * (1.0 + profile.velocity_jitter * rng.normal())
    torso = max(torso, 500.0)
    swing = profile.swing_scale * max(0.0, 1.0 + 0.12 * rng.normal()) if profile.swing_scale > 0 else 0.0
    toe = mean_toe_velocity(torso, swing)

    lo, hi = STRIKE_RANGE[strike]
    m = rng.integers(lo, hi + 1) if landing is None else round(landing * 256)
    cop_clean = m / 256.0
    x_land = FOOT_CENTER + FOOT_PX * cop_clean

    g_raw = profile.cadence * (0.35 + 0.25 * torso / 1250.0 + 0.15 * swing)
    g = min(max(_q8(g_raw), 0.375), 1.125)
    s = min(max(_q8(profile.drift_sd * rng.normal()), -0.375), 0.375)

    if impact_idx is None:
        impact_idx = rng.integers(IMPACT_RANGE[0], min(IMPACT_RANGE[1], n_frames - 1) + 1)
    k = np.maximum(impact_idx - np.arange(n_frames), 0).astype(np.float64)
    frames = render_scene(g * k, x_land + s * k)

    if profile.jitter_px > 0:
        j = profile.jitter_px
        offs = noise_rng.integers(-j, j + 1, 2 * n_frames).reshape(n_frames, 2)
        for t in range(n_frames):
            if offs[t, 0] or offs[t, 1]:
                frames[t] = _shift_frame(frames[t], int(offs[t, 0]), int(offs[t, 1]), BACKGROUND)
    if profile.pixel_noise > 0:
        frames = frames + profile.pixel_noise * noise_rng.normal(frames.size).reshape(frames.shape)
    frames = np.clip(np.rint(frames), 0, 255).astype(np.uint8)

    cop = cop_clean
    if profile.cop_noise > 0:
        cop = cop_clean + profile.cop_noise * noise_rng.normal()
    cop = min(max(cop, -0.5), 0.5)
    return Trial(profile.subject_id, frames, int(impact_idx), cop, torso, toe, speed, strike)


def generate_dataset(n_subjects: int = 8, trials_per_subject: int = 90, seed: int = 0, first_id: int = 1) -> Dataset:
    """Balanced speed x strike grid per subject; each trial has its own hashed seed."""
    if n_subjects < 1 or trials_per_subject < 1:
        raise ValueError("need at least one subject and one trial per subject")
    profiles = [random_profile(first_id + i, seed) for i in range(n_subjects)]
    trials = []
    for prof in profiles:
        for i in range(trials_per_subject):
            strike = STRIKES[i % 3]
            speed = SPEEDS[(i // 3) % 3]
            tr = generate_trial(prof, speed, strike, derive_seed(seed, prof.subject_id, i))
            tr.trial_id = i
            trials.append(tr)
    return Dataset(profiles, trials, seed=seed)


def generate_base_dataset(n_clips: int = 48, seed: int = 0) -> Dataset:
    """Pretraining clips from a separate persona pool (ids from 1000 up)."""
    per = max(1, n_clips // 4)
    ds = generate_dataset(n_subjects=max(1, -(-n_clips // per)), trials_per_subject=per, seed=derive_seed("base", seed), first_id=1000)
    ds.trials = ds.trials[:n_clips]
    return ds


# ---------------------------------------------------------------------------
# Closed-form inverse (noise-free frames only)
# ---------------------------------------------------------------------------


def _band_geometry(frame: np.ndarray) -> tuple[float, float]:
    """Return ``(gap, x_edge)`` read off the left channel of a noise-free frame."""
    img = frame[0].astype(np.float64)
    cov = (img[:FOOT_ROW] - BACKGROUND) / BAND_AMP
    col = cov[:, -1]
    rows = np.nonzero(col > 0)[0]
    if rows.size == 0:
        raise ValueError("stair band not visible in frame")
    r_last = rows[-1]
    bottom = r_last + col[r_last]
    full = np.nonzero(col >= 1.0)[0]
    if full.size == 0:
        raise ValueError("no fully covered band row in frame")
    row = cov[full[-1]]
    c_first = np.nonzero(row > 0)[0][0]
    x_edge = c_first + 1.0 - row[c_first]
    return FOOT_ROW - bottom, x_edge


def invert_window(frames: np.ndarray) -> tuple[float, int]:
    """Recover ``(cop_norm, frames_to_impact)`` from the last two pre-impact frames."""
    gap1, x1 = _band_geometry(frames[-1])
    gap0, x0 = _band_geometry(frames[-2])
    g = gap0 - gap1
    if g <= 0:
        raise ValueError("window does not end before impact")
    k = gap1 / g
    s = x0 - x1
    x_land = x1 - s * k
    return (x_land - FOOT_CENTER) / FOOT_PX, int(round(k))


def invert_trial(trial: Trial) -> tuple[float, int]:
    """Recover ``(cop_norm, impact_idx)`` from a noise-free clip."""
    for t in range(trial.frames.shape[0]):
        try:
            gap, x_edge = _band_geometry(trial.frames[t])
        except ValueError:
            continue
        if gap == 0.0:
            return (x_edge - FOOT_CENTER) / FOOT_PX, t
    raise ValueError("no impact frame found")


# ---------------------------------------------------------------------------
# Frame and label processing
# ---------------------------------------------------------------------------


def normalize_frame(raw: np.ndarray) -> np.ndarray:
    """Joint min-max over both stereo channels of each frame; constant frames -> 0.

    Accepts one frame ``(2, H, W)`` or a stack ``(N, 2, H, W)``.
    """
    x = np.asarray(raw, dtype=np.float32)
    single = x.ndim == 3
    xb = x[None] if single else x
    lo = xb.min(axis=(1, 2, 3), keepdims=True)
    hi = xb.max(axis=(1, 2, 3), keepdims=True)
    span = hi - lo
    out = np.where(span > 0, (xb - lo) / np.where(span > 0, span, 1.0), 0.0).astype(np.float32)
    return out[0] if single else out


def cop_to_mm(cop_norm, insole_mm: float, strict: bool = True):
    """Rear-foot-zero millimetres: ``(cop_norm + 0.5) * L``."""
    c = np.asarray(cop_norm, dtype=np.float64)
    if strict and (np.any(c < -0.5) or np.any(c > 0.5)):
        raise ValueError(f"cop_norm outside [-0.5, 0.5]: {cop_norm}")
    out = (c + 0.5) * float(insole_mm)
    return float(out) if out.ndim == 0 else out


def toi_targets(impact_idx: int, t: int) -> tuple[int, float]:
    """Frames remaining until impact and the same in seconds."""
    if t >= impact_idx:
        raise ValueError(f"frame {t} is not before impact frame {impact_idx}")
    k = impact_idx - t
    return k, k / FPS


def in_loss_window(k: int, window: int = WINDOW) -> bool:
    return 1 <= k <= window


def covariates(trial: Trial) -> tuple[float, float]:
    return trial.torso_velocity, trial.toe_velocity


# ---------------------------------------------------------------------------
# Dataset file
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"GAIT"
DATASET_VERSION = 1
_PROFILE = struct.Struct("<H8fQ")
_TRIAL = struct.Struct("<HHHfffBB")


def _profile_pack(p: SubjectProfile) -> bytes:
    return _PROFILE.pack(
        p.subject_id, p.insole_mm, p.cadence, p.swing_scale, float(p.jitter_px),
        p.pixel_noise, p.cop_noise, p.drift_sd, p.velocity_jitter, p.noise_seed,
    )


def dataset_to_bytes(ds: Dataset) -> bytes:
    parts = [struct.pack("<HQH", ds.version, ds.seed & 0xFFFFFFFFFFFFFFFF, len(ds.profiles))]
    parts += [_profile_pack(p) for p in ds.profiles]
    parts.append(struct.pack("<I", len(ds.trials)))
    for t in ds.trials:
        parts.append(
            _TRIAL.pack(
                t.subject_id, t.frames.shape[0], t.impact_idx, t.cop_norm, t.torso_velocity,
                t.toe_velocity, SPEEDS.index(t.speed), STRIKES.index(t.strike),
            )
        )
        parts.append(np.ascontiguousarray(t.frames, dtype=np.uint8).tobytes())
    payload = b"".join(parts)
    return DATASET_MAGIC + payload + hashlib.blake2b(payload, digest_size=8).digest()


def dataset_from_bytes(blob: bytes) -> Dataset:
    if blob[:4] != DATASET_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {DATASET_MAGIC!r}")
    view = memoryview(blob)
    off = 4

    def take(n: int) -> memoryview:
        nonlocal off
        # the trailing 8 bytes are the checksum, never payload
        if off + n > len(blob) - 8:
            raise TruncatedError(f"dataset truncated at byte {off} (need {n} more)")
        chunk = view[off : off + n]
        off += n
        return chunk

    version, seed, n_prof = struct.unpack("<HQH", take(12))
    if version != DATASET_VERSION:
        raise VersionError(f"dataset version {version} unsupported (expected {DATASET_VERSION})")
    profiles = []
    for _ in range(n_prof):
        v = _PROFILE.unpack(take(_PROFILE.size))
        profiles.append(
            SubjectProfile(
                subject_id=v[0], insole_mm=v[1], cadence=v[2], swing_scale=v[3], jitter_px=int(v[4]),
                pixel_noise=v[5], cop_noise=v[6], drift_sd=v[7], velocity_jitter=v[8], noise_seed=v[9],
            )
        )
    (n_trials,) = struct.unpack("<I", take(4))
    frame_bytes = int(np.prod(FRAME_SHAPE))
    trials = []
    counters: dict = {}
    for _ in range(n_trials):
        sid, nf, impact, cop, torso, toe, sp, st = _TRIAL.unpack(take(_TRIAL.size))
        frames = np.frombuffer(take(nf * frame_bytes), dtype=np.uint8).reshape((nf,) + FRAME_SHAPE).copy()
        if sp >= len(SPEEDS) or st >= len(STRIKES):
            raise InvariantError(f"unknown category code {sp}/{st}")
        tr = Trial(sid, frames, impact, cop, torso, toe, SPEEDS[sp], STRIKES[st], trial_id=counters.get(sid, 0))
        counters[sid] = counters.get(sid, 0) + 1
        trials.append(tr)
    if off != len(blob) - 8:
        raise ChecksumError(f"{len(blob) - 8 - off} unexpected bytes before checksum")
    payload = blob[4:off]
    if hashlib.blake2b(payload, digest_size=8).digest() != blob[off:]:
        raise ChecksumError("dataset payload checksum mismatch")
    known = {p.subject_id for p in profiles}
    for tr in trials:
        if tr.subject_id not in known:
            raise InvariantError(f"trial references unknown subject {tr.subject_id}")
        tr.check()
    return Dataset(profiles, trials, seed=seed, version=version)


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def read_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
