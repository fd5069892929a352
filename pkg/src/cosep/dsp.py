"""Waveform/spectrogram conversions, log-frequency warping, masks, WAV I/O.

Conventions.  The STFT keeps the full non-negative-frequency grid of
window_size/2 + 1 rows (DC through Nyquist), so inversion is exact; the
log-frequency warp used for mask learning samples rows 1..window_size/2
on a geometric grid, leaving DC out of the masking path.  Magnitude and
phase are stored as float32 planes; FFT work happens in float64.
"""

from __future__ import annotations

import wave as _wavemod
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "StftConfig",
    "Spectrogram",
    "MaskPlane",
    "TOY_STFT",
    "PAPER_STFT",
    "stft",
    "istft",
    "log_warp",
    "log_unwarp",
    "warp_positions",
    "warp_matrix",
    "unwarp_matrix",
    "ideal_binary_mask",
    "apply_mask",
    "write_wav",
    "read_wav",
]

OLA_EPS = 1e-8


@dataclass(frozen=True)
class StftConfig:
    """Analysis parameters; the FFT size equals the (even) window size."""

    sample_rate: int
    window_size: int
    hop: int
    window: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.window_size < 4 or self.window_size % 2:
            raise ValueError(f"window_size must be even and >= 4, got {self.window_size}")
        if not 1 <= self.hop <= self.window_size:
            raise ValueError(f"hop must lie in [1, window_size], got {self.hop}")
        # symmetric Hann; palindromic, values in [0, 1]
        object.__setattr__(self, "window", np.hanning(self.window_size))

    @property
    def fft_size(self) -> int:
        return self.window_size

    @property
    def n_bins(self) -> int:
        """Rows of the linear grid: DC through Nyquist inclusive."""
        return self.window_size // 2 + 1

    def frame_count(self, n_samples: int) -> int:
        return (n_samples - self.window_size) // self.hop + 1

    def sample_count(self, n_frames: int) -> int:
        return self.window_size + (n_frames - 1) * self.hop


TOY_STFT = StftConfig(sample_rate=8000, window_size=510, hop=128)
PAPER_STFT = StftConfig(sample_rate=11025, window_size=1022, hop=256)


@dataclass
class Spectrogram:
    """Time-frequency grid: magnitude (and optionally phase) planes.

    ``scale`` is "linear" for STFT-native rows and "log" after warping;
    only linear spectrograms with phase can be inverted.
    """

    magnitude: np.ndarray
    phase: np.ndarray | None
    scale: str
    config: StftConfig

    def __post_init__(self):
        self.magnitude = np.asarray(self.magnitude, dtype=np.float32)
        if self.magnitude.ndim != 2:
            raise ValueError("spectrogram planes must be 2-d [bins, frames]")
        if np.any(self.magnitude < 0):
            raise ValueError("spectrogram magnitude must be non-negative")
        if self.scale not in ("linear", "log"):
            raise ValueError(f"unknown scale {self.scale!r}")
        if self.phase is not None:
            self.phase = np.asarray(self.phase, dtype=np.float32)
            if self.phase.shape != self.magnitude.shape:
                raise ValueError("phase plane shape differs from magnitude plane")

    @property
    def bins(self) -> int:
        return self.magnitude.shape[0]

    @property
    def frames(self) -> int:
        return self.magnitude.shape[1]


@dataclass
class MaskPlane:
    """bins x frames mask; binary masks hold {0,1}, ratio masks [0,1]."""

    values: np.ndarray
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.kind == "binary":
            if not np.all((self.values == 0) | (self.values == 1)):
                raise ValueError("binary mask must contain only 0 and 1")
        elif self.kind == "ratio":
            if np.any(self.values < 0) or np.any(self.values > 1):
                raise ValueError("ratio mask values must lie in [0, 1]")
        else:
            raise ValueError(f"unknown mask kind {self.kind!r}")

    @property
    def shape(self):
        return self.values.shape


# ---------------------------------------------------------------------
# STFT / iSTFT
# ---------------------------------------------------------------------

def stft(wave: np.ndarray, cfg: StftConfig) -> Spectrogram:
    """Hann-windowed STFT onto the full linear grid (DC..Nyquist)."""
    wave = np.asarray(wave, dtype=np.float64).reshape(-1)
    if wave.size < cfg.window_size:
        raise ValueError(
            f"waveform has {wave.size} samples, needs at least one window ({cfg.window_size})")
    frames = np.lib.stride_tricks.sliding_window_view(wave, cfg.window_size)[::cfg.hop]
    spec = np.fft.rfft(frames * cfg.window, axis=1).T  # [bins, frames]
    return Spectrogram(np.abs(spec).astype(np.float32),
                       np.angle(spec).astype(np.float32), "linear", cfg)


def istft(spec: Spectrogram) -> np.ndarray:
    """Overlap-add inversion with window-square normalization."""
    if spec.scale != "linear":
        raise ValueError("istft requires a linear-scale spectrogram (log_unwarp first)")
    if spec.phase is None:
        raise ValueError("istft requires a phase plane")
    cfg = spec.config
    if spec.bins != cfg.n_bins:
        raise ValueError(f"expected {cfg.n_bins} linear bins, got {spec.bins}")
    z = spec.magnitude.astype(np.float64) * np.exp(1j * spec.phase.astype(np.float64))
    frames_t = np.fft.irfft(z.T, n=cfg.fft_size, axis=1)  # [frames, window]
    n_frames = frames_t.shape[0]
    out_len = cfg.sample_count(n_frames)
    out = np.zeros(out_len)
    norm = np.zeros(out_len)
    w = cfg.window
    w2 = w * w
    for f in range(n_frames):
        lo = f * cfg.hop
        out[lo:lo + cfg.window_size] += frames_t[f] * w
        norm[lo:lo + cfg.window_size] += w2
    # floor relative to the envelope peak: an absolute epsilon would blow
    # up masked (non-consistent) spectra at the partially covered edges
    return out / np.maximum(norm, max(OLA_EPS, 1e-2 * norm.max()))


# ---------------------------------------------------------------------
# log-frequency warping
# ---------------------------------------------------------------------

def warp_positions(n_bins: int, out_bins: int) -> np.ndarray:
    """Geometric source row positions in [1, n_bins-1] for each warped bin."""
    top = n_bins - 1
    return np.exp(np.linspace(0.0, np.log(top), out_bins))


_WARP_CACHE: dict = {}


def warp_matrix(n_bins: int, out_bins: int) -> np.ndarray:
    """[out_bins, n_bins] linear-interpolation rows at geometric positions."""
    key = ("warp", n_bins, out_bins)
    m = _WARP_CACHE.get(key)
    if m is None:
        pos = warp_positions(n_bins, out_bins)
        lo = np.minimum(pos.astype(np.int64), n_bins - 2)
        frac = pos - lo
        m = np.zeros((out_bins, n_bins), dtype=np.float32)
        m[np.arange(out_bins), lo] = 1 - frac
        m[np.arange(out_bins), lo + 1] = frac
        _WARP_CACHE[key] = m
    return m


def unwarp_matrix(n_bins: int, out_bins: int) -> np.ndarray:
    """[n_bins, out_bins] inverse interpolation; DC copies the lowest warped bin."""
    key = ("unwarp", n_bins, out_bins)
    m = _WARP_CACHE.get(key)
    if m is None:
        top = n_bins - 1
        rows = np.arange(1, n_bins)
        b = (out_bins - 1) * np.log(rows) / np.log(top)
        lo = np.minimum(b.astype(np.int64), out_bins - 2)
        frac = b - lo
        m = np.zeros((n_bins, out_bins), dtype=np.float32)
        m[rows, lo] = 1 - frac
        m[rows, lo + 1] = frac
        m[0, 0] = 1.0
        _WARP_CACHE[key] = m
    return m


def log_warp(spec: Spectrogram, out_bins: int) -> Spectrogram:
    """Resample magnitude rows onto a geometric frequency grid."""
    if spec.scale != "linear":
        raise ValueError("log_warp expects a linear-scale spectrogram")
    if out_bins > spec.bins:
        raise ValueError(f"out_bins {out_bins} exceeds source bins {spec.bins}")
    if out_bins < 2:
        raise ValueError("out_bins must be >= 2")
    warped = warp_matrix(spec.bins, out_bins) @ spec.magnitude
    return Spectrogram(warped, None, "log", spec.config)


def log_unwarp(obj, cfg: StftConfig):
    """Invert log_warp back onto the full linear grid.

    Accepts a log-scale Spectrogram (returns a linear one, no phase) or a
    MaskPlane produced on the warped grid (returns a ratio MaskPlane on
    the linear grid).
    """
    if isinstance(obj, Spectrogram):
        if obj.scale != "log":
            raise ValueError("log_unwarp expects a log-scale spectrogram")
        values = unwarp_matrix(cfg.n_bins, obj.bins) @ obj.magnitude
        return Spectrogram(np.maximum(values, 0), None, "linear", cfg)
    if isinstance(obj, MaskPlane):
        values = unwarp_matrix(cfg.n_bins, obj.values.shape[0]) @ obj.values
        return MaskPlane(np.clip(values, 0.0, 1.0), "ratio")
    raise TypeError(f"cannot unwarp {type(obj).__name__}")


# ---------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------

def ideal_binary_mask(target: Spectrogram, other: Spectrogram) -> MaskPlane:
    """1 where the target's magnitude dominates (ties go to the target)."""
    if target.magnitude.shape != other.magnitude.shape or target.scale != other.scale:
        raise ValueError("ideal_binary_mask requires spectrograms on the same grid")
    return MaskPlane((target.magnitude >= other.magnitude).astype(np.float32), "binary")


def apply_mask(mixture: Spectrogram, mask: MaskPlane) -> Spectrogram:
    """Scale magnitudes by the mask; the mixture phase is kept as-is."""
    if mixture.scale != "linear":
        raise ValueError("apply_mask operates on the linear grid")
    if mask.values.shape != mixture.magnitude.shape:
        raise ValueError(
            f"mask grid {mask.values.shape} does not match spectrogram "
            f"{mixture.magnitude.shape}; log_unwarp warped masks first")
    return Spectrogram(mixture.magnitude * mask.values,
                       None if mixture.phase is None else mixture.phase.copy(),
                       "linear", mixture.config)


# ---------------------------------------------------------------------
# WAV I/O (PCM 16-bit little-endian mono)
# ---------------------------------------------------------------------

def write_wav(path, wave_data: np.ndarray, sample_rate: int) -> None:
    samples = np.clip(np.asarray(wave_data, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(samples * 32767.0).astype("<i2")
    with _wavemod.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path, expected_rate: int | None = None) -> tuple[np.ndarray, int]:
    with _wavemod.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} does not match configured {expected_rate}")
    wave_data = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32767.0
    return wave_data, rate
