"""Waveform preprocessing: low-pass filtering, segmentation, framing and noise statistics."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from speechcare.errors import DomainError, FormatError

WINDOW_SECONDS = 5.0
OVERLAP = 0.25
HOP_SECONDS = WINDOW_SECONDS * (1 - OVERLAP)
MAX_WINDOWS = 7
FRAMES_PER_SEGMENT = 250
FRAME_WINDOW_SECONDS = 0.025
FRAME_HOP_SECONDS = 0.020
N_BANDS = 16
FEATURE_DIM = N_BANDS + 1
LOWEST_BAND_HZ = 100.0
LOG_FLOOR = 1e-10
LOWPASS_TAPS = 255


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise DomainError("sample rate must be positive")
        if self.samples.ndim != 1:
            raise DomainError("waveform must be mono")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class SegmentPlan:
    starts: list[float]
    duration: float
    window_len: float = WINDOW_SECONDS
    hop: float = HOP_SECONDS
    max_windows: int = MAX_WINDOWS

    @property
    def padded(self) -> bool:
        return self.duration < self.window_len

    def __len__(self) -> int:
        return len(self.starts)


@dataclass
class Spectrogram:
    magnitude: np.ndarray  # frames x bins
    frame_length: int
    hop_length: int
    sample_rate: int
    zcr: np.ndarray | None = field(default=None, repr=False)

    @property
    def bins(self) -> int:
        return self.magnitude.shape[1]


# --------------------------------------------------------------------- I/O

def read_wav(path) -> Waveform:
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        x = data.astype(np.float64)
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    else:
        raise FormatError(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return Waveform(x, int(rate))


def write_wav(path, wave: Waveform, pcm16: bool = True) -> None:
    x = np.clip(wave.samples, -1.0, 1.0)
    if pcm16:
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    else:
        data = x.astype("<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, wave.sample_rate, data)


# ----------------------------------------------------------------- filtering

def lowpass_taps(cutoff: float, sample_rate: int, taps: int = LOWPASS_TAPS) -> np.ndarray:
    """Hamming-windowed sinc, normalized to unit DC gain."""
    fc = cutoff / sample_rate
    n = np.arange(taps) - (taps - 1) / 2
    h = 2 * fc * np.sinc(2 * fc * n) * np.hamming(taps)
    return h / h.sum()


def low_pass(wave: Waveform, cutoff: float = 8000.0, taps: int = LOWPASS_TAPS) -> Waveform:
    if wave.sample_rate <= 2 * cutoff:
        warnings.warn(f"cutoff {cutoff} Hz is at/above Nyquist for {wave.sample_rate} Hz audio; "
                      "returning input unchanged", stacklevel=2)
        return Waveform(wave.samples.copy(), wave.sample_rate)
    h = lowpass_taps(cutoff, wave.sample_rate, taps)
    # symmetric taps + centred 'same' convolution = zero phase
    if len(wave.samples) >= taps:
        y = np.convolve(wave.samples, h, mode="same")
    else:
        y = np.convolve(wave.samples, h, mode="full")[(taps - 1) // 2:(taps - 1) // 2 + len(wave.samples)]
    return Waveform(y, wave.sample_rate)


# -------------------------------------------------------------- segmentation

def plan_segments(duration: float) -> SegmentPlan:
    """5 s windows, 3.75 s apart, only where they fit; at most seven."""
    if not duration > 0:
        raise DomainError(f"duration must be positive, got {duration}")
    if duration < WINDOW_SECONDS:
        return SegmentPlan([0.0], duration)
    starts = []
    k = 0
    while len(starts) < MAX_WINDOWS and k * HOP_SECONDS + WINDOW_SECONDS <= duration:
        starts.append(k * HOP_SECONDS)
        k += 1
    return SegmentPlan(starts, duration)


def segment_waveform(wave: Waveform) -> list[Waveform]:
    if len(wave.samples) == 0:
        raise DomainError("empty waveform")
    plan = plan_segments(wave.duration)
    width = int(round(WINDOW_SECONDS * wave.sample_rate))
    segments = []
    for start in plan.starts:
        i = int(round(start * wave.sample_rate))
        chunk = wave.samples[i:i + width]
        if len(chunk) < width:
            chunk = np.pad(chunk, (0, width - len(chunk)))
        segments.append(Waveform(chunk, wave.sample_rate))
    return segments


# ------------------------------------------------------------------- framing

def _frame_params(sample_rate: int) -> tuple[int, int, int]:
    win = int(round(FRAME_WINDOW_SECONDS * sample_rate))
    hop = int(round(FRAME_HOP_SECONDS * sample_rate))
    nfft = max(512, 1 << (win - 1).bit_length())
    return win, hop, nfft


def band_edges(sample_rate: int) -> np.ndarray:
    return np.geomspace(LOWEST_BAND_HZ, sample_rate / 2, N_BANDS + 1)


def band_matrix(sample_rate: int, nfft: int) -> np.ndarray:
    """(bins, bands) 0/1 matrix assigning rfft bins to geometric bands."""
    freqs = np.fft.rfftfreq(nfft, 1.0 / sample_rate)
    edges = band_edges(sample_rate)
    m = np.zeros((len(freqs), N_BANDS))
    for b in range(N_BANDS):
        hi_ok = freqs <= edges[b + 1] if b == N_BANDS - 1 else freqs < edges[b + 1]
        sel = (freqs >= edges[b]) & hi_ok
        if not sel.any():
            centre = math.sqrt(edges[b] * edges[b + 1])
            sel = np.zeros(len(freqs), bool)
            sel[int(np.argmin(np.abs(freqs - centre)))] = True
        m[sel, b] = 1.0
    return m


def frame_spectrogram(segment: Waveform) -> Spectrogram:
    """Magnitude spectrogram with exactly 250 frames of 25 ms, 20 ms apart."""
    x = segment.samples
    if len(x) == 0:
        raise DomainError("empty segment")
    width = int(round(WINDOW_SECONDS * segment.sample_rate))
    if len(x) < width:
        x = np.pad(x, (0, width - len(x)))
    win, hop, nfft = _frame_params(segment.sample_rate)
    needed = (FRAMES_PER_SEGMENT - 1) * hop + win
    if len(x) < needed:
        x = np.pad(x, (0, needed - len(x)))
    idx = np.arange(FRAMES_PER_SEGMENT)[:, None] * hop + np.arange(win)[None, :]
    frames = x[idx]
    signs = np.signbit(frames)
    zcr = (signs[:, 1:] != signs[:, :-1]).mean(axis=1)
    zcr[np.all(frames == 0, axis=1)] = 0.0
    window = np.hanning(win)
    mag = np.abs(np.fft.rfft(frames * window, n=nfft, axis=1)) / window.sum()
    return Spectrogram(mag, win, hop, segment.sample_rate, zcr=zcr)


def spectrogram_features(spec: Spectrogram) -> np.ndarray:
    """16 log band energies plus zero-crossing rate per frame -> (frames, 17)."""
    nfft = (spec.bins - 1) * 2
    energies = (spec.magnitude ** 2) @ band_matrix(spec.sample_rate, nfft)
    zcr = spec.zcr if spec.zcr is not None else np.zeros(spec.magnitude.shape[0])
    return np.column_stack([np.log(energies + LOG_FLOOR), zcr])


def frame_segment(segment: Waveform) -> np.ndarray:
    return spectrogram_features(frame_spectrogram(segment))


def acoustic_frames(wave: Waveform, mask_rng: np.random.Generator | None = None,
                    max_mask_band: int = 27) -> np.ndarray:
    """Low-passed, segmented and framed features for a whole recording.

    With ``mask_rng`` each segment's spectrogram receives one frequency mask
    before the band energies are taken (augmentation for oversampled copies).
    """
    wave = low_pass(wave) if wave.sample_rate > 16000 else wave
    feats = []
    for seg in segment_waveform(wave):
        spec = frame_spectrogram(seg)
        if mask_rng is not None:
            spec = frequency_mask(spec, min(max_mask_band, spec.bins - 1), mask_rng)
        feats.append(spectrogram_features(spec))
    return np.concatenate(feats, axis=0)


# ----------------------------------------------------------------- statistics

def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def snr_db(signal: Waveform, noise: Waveform) -> float:
    if len(signal.samples) != len(noise.samples):
        raise DomainError("signal and noise must have equal length")
    n = _rms(noise.samples)
    if n == 0.0:
        return math.inf
    return 20.0 * math.log10(_rms(signal.samples) / n)


def spectral_flatness(wave: Waveform, frame: int = 512, hop: int = 256) -> float:
    """Mean over frames of geometric / arithmetic mean of the power spectrum.

    DC and Nyquist bins are left out; silent frames count as 0.
    """
    x = wave.samples
    if len(x) < frame:
        raise DomainError(f"need at least {frame} samples")
    n_frames = 1 + (len(x) - frame) // hop
    idx = np.arange(n_frames)[:, None] * hop + np.arange(frame)[None, :]
    power = np.abs(np.fft.rfft(x[idx] * np.hanning(frame), axis=1)[:, 1:-1]) ** 2
    arith = power.mean(axis=1)
    values = np.zeros(n_frames)
    live = arith > 0
    geo = np.exp(np.mean(np.log(power[live] + 1e-300), axis=1))
    values[live] = geo / arith[live]
    return float(values.mean())


def frequency_mask(spec: Spectrogram, max_band: int, rng: np.random.Generator | int) -> Spectrogram:
    """Zero one contiguous band of ``width ~ U{0..max_band}`` bins."""
    if max_band < 0 or max_band >= spec.bins:
        raise DomainError(f"max_band must lie in [0, {spec.bins}), got {max_band}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    width = int(rng.integers(0, max_band + 1))
    start = int(rng.integers(0, spec.bins - width + 1))
    mag = spec.magnitude.copy()
    mag[:, start:start + width] = 0.0
    return Spectrogram(mag, spec.frame_length, spec.hop_length, spec.sample_rate, zcr=spec.zcr)


def spectrogram_to_csv(spec: Spectrogram, path) -> None:
    np.savetxt(path, spec.magnitude, delimiter=",", fmt="%.8g")
