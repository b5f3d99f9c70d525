"""Peak-based slicing of long recordings into fixed-length labelled windows.

Pipeline: wrap-pad short audio, log-mel spectrogram, per-channel robust
denoising, channel sum into a signal vector, multi-scale Ricker peak finding,
a 0.6 s peak gate, then fixed-length windows centred on the strongest peaks.
"""
from __future__ import annotations

import csv
import math
import warnings
import wave as _wave
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import (butter, convolve, find_peaks_cwt, peak_prominences, resample_poly,
                          sosfilt)

from .errors import ConfigError, DataError

SAMPLE_RATE = 32000
STRIDE = 320
WINDOW = 1024
MEL_BINS = 160
F_MIN = 60.0
F_MAX = 16000.0
LOG_EPS = 1e-10
KERNEL_WIDTHS = 8.0       # Ricker kernel support, in multiples of its width
RIDGE_FRACTION = 0.5      # a ridge must span at least this fraction of the scales
MODES = {"source": (6.0, 5), "soundscape": (5.0, 200)}


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        if x.ndim != 1:
            raise DataError("only mono waveforms are supported")
        if not self.rate > 0:
            raise ConfigError("sample rate must be positive")
        if not np.all(np.isfinite(x)):
            raise DataError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", x)

    @property
    def duration(self):
        return len(self.samples) / self.rate


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray      # (channels, frames)
    frame_rate: float
    log_scaled: bool = True

    def __post_init__(self):
        if not self.frame_rate > 0:
            raise ConfigError("frame rate must be positive")


@dataclass(frozen=True)
class PeakList:
    indices: np.ndarray
    prominences: np.ndarray

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class Slice:
    start: float
    duration: float
    labels: frozenset = frozenset()


# -- audio I/O ---------------------------------------------------------------

def read_wav(path):
    """Mono 16-bit PCM WAV to a float waveform in [-1, 1)."""
    try:
        with _wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1:
                raise DataError(f"{path}: only mono audio is supported")
            if fh.getsampwidth() != 2:
                raise DataError(f"{path}: only 16-bit PCM is supported")
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (_wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a readable WAV file ({exc})") from None
    samples = np.frombuffer(raw, dtype="<i2").astype(float) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, wave):
    pcm = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype("<i2")
    with _wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(wave.rate))
        fh.writeframes(pcm.tobytes())


def resample(wave, rate=SAMPLE_RATE):
    """Polyphase resampling with a Kaiser-windowed sinc filter."""
    if wave.rate == rate:
        return wave
    ratio = Fraction(int(rate), int(wave.rate))
    out = resample_poly(wave.samples, ratio.numerator, ratio.denominator)
    return Waveform(out, rate)


def wrap_pad(samples, length):
    """Pad evenly left and right with wrap-around up to ``length`` samples."""
    n = len(samples)
    if n >= length:
        return samples, 0
    left = (length - n) // 2
    return np.pad(samples, (left, length - n - left), mode="wrap"), left


# -- spectrogram ---------------------------------------------------------------

def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_centers(bins=MEL_BINS, f_min=F_MIN, f_max=F_MAX):
    return _mel_to_hz(np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), bins + 2))[1:-1]


def mel_filterbank(rate, window, bins=MEL_BINS, f_min=F_MIN, f_max=F_MAX):
    """Triangular filters on the rfft grid, ``(bins, window // 2 + 1)``.

    Filters too narrow to contain any FFT bin take the bin nearest their centre.
    """
    if f_max > rate / 2:
        raise ConfigError(f"f_max {f_max} exceeds the Nyquist frequency {rate / 2}")
    edges = _mel_to_hz(np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), bins + 2))
    freqs = np.fft.rfftfreq(window, 1.0 / rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    fb = np.maximum(0.0, np.minimum((freqs - lo) / (mid - lo), (hi - freqs) / (hi - mid)))
    for b in np.flatnonzero(fb.sum(axis=1) == 0):
        fb[b, np.argmin(np.abs(freqs - edges[b + 1]))] = 1.0
    return fb


def log_mel(wave, bins=MEL_BINS, stride=STRIDE, window=WINDOW, f_min=F_MIN, f_max=F_MAX):
    """Log mel power spectrogram with ``ceil(len / stride)`` frames.

    Frame ``t`` is a Hann-windowed segment centred on samples
    ``[t * stride, (t + 1) * stride)``; the edges are wrap-padded.
    """
    if window < stride:
        raise ConfigError("window must be at least the stride")
    x = wave.samples
    if len(x) == 0:
        raise DataError("empty waveform")
    frames = math.ceil(len(x) / stride)
    left = (window - stride) // 2
    right = (frames - 1) * stride + window - left - len(x)
    padded = np.pad(x, (left, max(right, 0)), mode="wrap")
    idx = np.arange(frames)[:, None] * stride + np.arange(window)[None, :]
    power = np.abs(np.fft.rfft(padded[idx] * np.hanning(window), axis=1)) ** 2
    mel = mel_filterbank(wave.rate, window, bins, f_min, f_max) @ power.T
    return Spectrogram(np.log(mel + LOG_EPS), frame_rate=wave.rate / stride)


def denoise(spec, outlier_sigma=1.5, signal_sigma=0.75):
    """Zero the background of every channel and shift the rest by its robust mean.

    Values beyond ``outlier_sigma`` standard deviations are excluded from a
    robust mean / standard deviation (``n + 1`` in both denominators); values
    more than ``signal_sigma`` robust deviations from the robust mean are
    kept, shifted by that mean. A channel with zero spread has no signal.
    """
    v = np.asarray(spec.values, dtype=float)
    mu = v.mean(axis=1, keepdims=True)
    sd = v.std(axis=1, keepdims=True)
    inlier = np.abs(v - mu) <= outlier_sigma * sd
    n_in = inlier.sum(axis=1, keepdims=True)
    r_mean = np.where(inlier, v, 0.0).sum(axis=1, keepdims=True) / (n_in + 1)
    r_var = np.where(inlier, (v - r_mean) ** 2, 0.0).sum(axis=1, keepdims=True) / (n_in + 1)
    r_sd = np.sqrt(r_var)
    signal = (np.abs(v - r_mean) > signal_sigma * r_sd) & (sd > 0)
    return Spectrogram(np.where(signal, v - r_mean, 0.0), spec.frame_rate, spec.log_scaled)


# -- peak finding ------------------------------------------------------------

def ricker(points, width):
    """Ricker ("Mexican hat") wavelet on ``points`` samples, zero beyond 4 widths."""
    a = 2.0 / (np.sqrt(3.0 * width) * np.pi ** 0.25)
    t = np.arange(0, points) - (points - 1.0) / 2
    x = (t / width) ** 2
    out = a * (1.0 - x) * np.exp(-x / 2.0)
    out[np.abs(t) > KERNEL_WIDTHS / 2 * width] = 0.0
    return out


def peak_widths_frames(frame_rate, lo=0.5, hi=2.0, count=10):
    return np.linspace(lo, hi, count) * frame_rate


def ricker_peaks(signal, frame_rate=SAMPLE_RATE / STRIDE, widths=None, min_snr=1.0,
                 noise_perc=10.0, min_length=None):
    """Ridge-line peaks of the multi-scale Ricker transform of ``signal``.

    ``widths`` (in frames) default to 10 values from 0.5 s to 2 s. Ridges
    must cover at least half the scales. Signals shorter than the largest
    kernel are reflect-padded first.
    """
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1:
        raise DataError("signal must be one-dimensional")
    empty = PeakList(np.zeros(0, dtype=np.int64), np.zeros(0))
    if x.size < 3 or np.ptp(x) == 0:
        return empty
    widths = peak_widths_frames(frame_rate) if widths is None else np.asarray(widths, float)
    if min_length is None:
        min_length = math.ceil(RIDGE_FRACTION * len(widths))
    # scipy sizes each kernel as 10 widths (capped at the input length)
    need = int(math.ceil(10 * widths.max()))
    pad = max(0, (need - x.size + 1) // 2 + 1)
    padded = np.pad(x, pad, mode="reflect") if pad else x
    found = find_peaks_cwt(padded, widths, wavelet=ricker, min_length=min_length,
                           min_snr=min_snr, noise_perc=noise_perc)
    found = np.asarray(found, dtype=np.int64)
    # the routine's SNR test takes an absolute value, so troughs between two
    # bumps can pass it; keep only ridges that are bumps at the finest scale
    n0 = min(10 * widths[0], padded.size)
    finest = convolve(padded, ricker(n0, widths[0])[::-1], mode="same")
    found = found[finest[found] > 0] if found.size else found
    idx = found - pad
    idx = np.unique(idx[(idx >= 0) & (idx < x.size)])
    if idx.size == 0:
        return empty
    with warnings.catch_warnings():
        # ridge maxima of the smoothed transform can sit on a plateau of the raw signal
        warnings.simplefilter("ignore", RuntimeWarning)
        prom = peak_prominences(x, idx)[0]
    return PeakList(idx, prom)


# -- slicing -----------------------------------------------------------------

def signal_vector(wave):
    return denoise(log_mel(wave)).values.sum(axis=0)


def gate_peaks(signal, peaks, frame_rate, window_s=0.6, factor=1.5):
    """Drop peaks whose surrounding window never reaches ``factor`` times the global mean."""
    half = int(round(window_s * frame_rate / 2))
    floor = factor * float(np.mean(signal))
    keep = [p for p in peaks if signal[max(0, p - half):p + half + 1].max() >= floor]
    return np.asarray(keep, dtype=np.int64)


def extract_slices(wave, mode="source", max_peaks=None):
    """Fixed-length windows centred on the strongest peaks, in time order.

    ``mode="source"`` gives 6 s windows from up to 5 peaks,
    ``"soundscape"`` 5 s windows from up to 200. Recordings shorter than the
    window are wrap-padded and yield one window covering the padded audio
    (start times are relative to the unpadded recording). Silence yields
    nothing.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown slicing mode {mode!r}")
    length_s, top = MODES[mode]
    top = top if max_peaks is None else max_peaks
    wave = resample(wave)
    if not np.any(wave.samples):
        return []
    total = int(round(length_s * wave.rate))
    if len(wave.samples) <= total:
        _, left = wrap_pad(wave.samples, total)
        return [Slice(-left / wave.rate, length_s)]
    sig = signal_vector(wave)
    frame_rate = wave.rate / STRIDE
    peaks = ricker_peaks(sig, frame_rate).indices
    peaks = gate_peaks(sig, peaks, frame_rate)
    if peaks.size == 0:
        return []
    order = np.lexsort((peaks, -sig[peaks]))[:top]
    chosen = np.sort(peaks[order])
    duration = wave.duration
    out = []
    for p in chosen:
        centre = (p + 0.5) / frame_rate
        start = min(max(centre - length_s / 2, 0.0), duration - length_s)
        out.append(Slice(float(start), length_s))
    return out


def label_windows(slices, boxes):
    """Label each window with the union of the boxes it overlaps; drop the rest.

    ``boxes`` holds ``(start_s, end_s, label)``; a window overlaps a box when
    the open intervals intersect (touching endpoints do not count).
    """
    out = []
    for s in slices:
        end = s.start + s.duration
        labels = {lab for b0, b1, lab in boxes if s.start < b1 and b0 < end}
        if labels:
            out.append(Slice(s.start, s.duration, frozenset(labels)))
    return out


def read_boxes(path):
    with open(path, newline="") as fh:
        return [(float(r["start_s"]), float(r["end_s"]), r["label"]) for r in csv.DictReader(fh)]


def synth_recording(duration, events, rate=SAMPLE_RATE, noise=0.005, seed=0,
                    event_len=0.4, amplitude=0.5):
    """Low background noise plus windowed tones at the given ``(centre_s, freq_hz)`` events."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * rate))
    x = noise * rng.standard_normal(n)
    t = np.arange(n) / rate
    for centre, freq in events:
        env = np.exp(-0.5 * ((t - centre) / (event_len / 4)) ** 2)
        x += amplitude * env * np.sin(2 * np.pi * freq * t)
    return Waveform(x, rate)


def synth_bursts(duration, centres, rate=SAMPLE_RATE, noise=1e-6, seed=0, event_len=0.5,
                 amplitude=0.3, band=(1500.0, 5000.0)):
    """Background noise plus band-limited noise bursts centred at ``centres`` (seconds).

    Each burst is Gaussian noise through a 4th-order Butterworth band-pass
    whose lower edge is drawn from ``band`` (upper edge 1.8 times that),
    normalised to unit power and shaped by a Gaussian envelope.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * rate))
    t = np.arange(n) / rate
    x = noise * rng.standard_normal(n)
    for c in centres:
        lo = rng.uniform(*band)
        sos = butter(4, [lo, min(1.8 * lo, 0.45 * rate)], btype="band", fs=rate, output="sos")
        burst = sosfilt(sos, rng.standard_normal(n))
        env = np.exp(-0.5 * ((t - c) / (event_len / 4)) ** 2)
        x += amplitude * env * burst / np.std(burst)
    return Waveform(x, rate)
