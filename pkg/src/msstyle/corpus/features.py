"""Feature extraction and alignment arithmetic."""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.signal import get_window

from msstyle.corpus.types import (
    AlignmentMap,
    ContextWindow,
    FrameRange,
    MelConfig,
    MelSpectrogram,
    Utterance,
)
from msstyle.errors import ContractError, InvalidInputError


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: MelConfig) -> np.ndarray:
    """Center frequency (Hz) of each triangular mel filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(config: MelConfig) -> np.ndarray:
    """HTK-scale triangular filterbank of shape ``(n_mels, frame_size // 2 + 1)``."""
    n_bins = config.frame_size // 2 + 1
    fft_freqs = np.linspace(0.0, config.sample_rate / 2, n_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def _frame_signal(waveform: np.ndarray, frame_size: int, hop_size: int) -> np.ndarray:
    """Centered framing with reflect padding; yields ``len // hop + 1`` frames."""
    pad = frame_size // 2
    mode = "reflect" if len(waveform) > 1 else "edge"
    padded = np.pad(waveform, pad, mode=mode)
    n_frames = len(waveform) // hop_size + 1
    return np.lib.stride_tricks.sliding_window_view(padded, frame_size)[::hop_size][:n_frames]


def _check_waveform(waveform) -> np.ndarray:
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidInputError("waveform must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("waveform contains non-finite samples")
    return x


def magnitude_spectrogram(waveform, config: MelConfig) -> np.ndarray:
    x = _check_waveform(waveform)
    frames = _frame_signal(x, config.frame_size, config.hop_size)
    window = get_window("hann", config.frame_size, fftbins=True)
    return np.abs(np.fft.rfft(frames * window, axis=-1))


def compute_mel(waveform, config: MelConfig | None = None) -> MelSpectrogram:
    """Log-mel spectrogram with ``floor(N / hop) + 1`` centered frames."""
    config = config or MelConfig()
    mag = magnitude_spectrogram(waveform, config)
    mel = mag @ mel_filterbank(config).T
    logmel = np.maximum(np.log(np.maximum(mel, 1e-30)), config.log_floor)
    return MelSpectrogram(logmel.astype(np.float32), config)


def frame_energy(mel: MelSpectrogram | np.ndarray) -> np.ndarray:
    """Per-frame L2 norm of the linear-magnitude mel frame."""
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    return np.linalg.norm(np.exp(frames.astype(np.float64)), axis=-1).astype(np.float32)


def estimate_pitch(
    waveform,
    config: MelConfig | None = None,
    fmin: float = 60.0,
    fmax: float = 500.0,
    voicing_threshold: float = 0.45,
    silence_db: float = -60.0,
) -> np.ndarray:
    """Autocorrelation F0 tracker on the mel framing grid; 0 marks unvoiced frames.

    Each frame's normalised autocorrelation is searched for local peaks in
    the lag range ``[sr / fmax, sr / fmin]``; the earliest peak within 90% of
    the strongest is taken and refined by parabolic interpolation. Frames whose peak falls below
    ``voicing_threshold`` or whose level is below ``silence_db`` relative to
    the loudest frame are unvoiced.
    """
    config = config or MelConfig()
    x = _check_waveform(waveform)
    frames = _frame_signal(x, config.frame_size, config.hop_size)
    frames = frames - frames.mean(axis=1, keepdims=True)
    frames = frames * get_window("hann", config.frame_size, fftbins=True)
    n_fft = 1 << int(np.ceil(np.log2(2 * config.frame_size)))
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, axis=1)[:, : config.frame_size]
    # Unbias for the window's own autocorrelation so long lags are not penalised.
    w = get_window("hann", config.frame_size, fftbins=True)
    w_acf = np.fft.irfft(np.abs(np.fft.rfft(w, n=n_fft)) ** 2)[: config.frame_size]
    power = acf[:, 0]
    lo = max(1, int(np.floor(config.sample_rate / fmax)))
    hi = min(config.frame_size - 2, int(np.ceil(config.sample_rate / fmin)))
    level_floor = power.max() * 10 ** (silence_db / 10) if power.max() > 0 else np.inf

    f0 = np.zeros(len(frames), dtype=np.float64)
    for t in range(len(frames)):
        if power[t] <= 0 or power[t] < level_floor:
            continue
        r = acf[t] / power[t] / (w_acf / w_acf[0])
        seg = r[lo:hi + 1]
        peaks = np.flatnonzero((seg[1:-1] > seg[:-2]) & (seg[1:-1] >= seg[2:])) + 1
        if len(peaks) == 0:
            continue
        best = seg[peaks].max()
        # earliest strong peak, so octave-down lags with equal correlation lose
        k = int(peaks[np.argmax(seg[peaks] >= 0.9 * best)]) + lo
        if r[k] < voicing_threshold:
            continue
        a, b, c = r[k - 1], r[k], r[k + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
        f0[t] = config.sample_rate / (k + shift)
    return f0.astype(np.float32)


def average_by_duration(frame_values, durations: Sequence[int]) -> np.ndarray:
    """Mean of ``frame_values`` over each phoneme's frames; 0 for zero-length phonemes."""
    values = np.asarray(frame_values, dtype=np.float64)
    durs = np.asarray(durations, dtype=np.int64)
    if np.any(durs < 0):
        raise ContractError("durations must be non-negative")
    if durs.sum() != len(values):
        raise ContractError(f"durations sum to {durs.sum()} but {len(values)} frame values given")
    out = np.zeros(len(durs), dtype=np.float64)
    start = 0
    for i, d in enumerate(durs):
        if d > 0:
            out[i] = values[start:start + d].mean()
        start += d
    return out


def expand_by_duration(values, durations: Sequence[int]) -> np.ndarray:
    return np.repeat(np.asarray(values), np.asarray(durations, dtype=np.int64), axis=0)


def subword_frame_boundaries(alignment: AlignmentMap) -> list[FrameRange]:
    """Half-open frame range of each subword; the ranges partition ``[0, T)``."""
    offsets = np.concatenate([[0], np.cumsum(alignment.phoneme_durations, dtype=np.int64)])
    return [FrameRange(int(offsets[first]), int(offsets[last + 1])) for first, last in alignment.subword_spans]


def subword_segments(mel: MelSpectrogram, ranges: Sequence[FrameRange]) -> list[np.ndarray]:
    """Slice mel frames per subword; an empty range becomes one log_floor frame."""
    out = []
    for r in ranges:
        if r.empty:
            out.append(np.full((1, mel.config.n_mels), mel.config.log_floor, dtype=np.float32))
        else:
            out.append(mel.frames[r.start:r.stop])
    return out


def build_context_window(
    corpus: Sequence[Utterance],
    index: int,
    radius: int = 2,
    pad: Utterance | None = None,
) -> ContextWindow:
    """The ``2 * radius + 1`` sentences centered on ``corpus[index]``.

    Positions outside the corpus are filled with the canonical padding
    utterance.
    """
    if not 0 <= index < len(corpus):
        raise ContractError(f"index {index} out of range for corpus of {len(corpus)}")
    if radius < 0:
        raise ContractError(f"radius must be >= 0, got {radius}")
    if pad is None:
        pad = Utterance.padding(corpus[index].mel.config)

    def at(i):
        return corpus[i] if 0 <= i < len(corpus) else pad

    past = tuple(at(i) for i in range(index - radius, index))
    future = tuple(at(i) for i in range(index + 1, index + radius + 1))
    return ContextWindow(past, corpus[index], future, radius)


def concat_window_mels(window: ContextWindow, max_frames: int | None = None) -> np.ndarray:
    """Concatenate the window's mels along time, truncated around the current sentence.

    When the total exceeds ``max_frames``, a ``max_frames`` span centered on
    the current sentence is kept (shifted inward at the edges).
    """
    mels = [u.mel.frames for u in window.utterances]
    full = np.concatenate(mels, axis=0)
    if max_frames is None or len(full) <= max_frames:
        return full
    start_cur = sum(len(m) for m in mels[: window.radius])
    center = start_cur + len(mels[window.radius]) // 2
    start = min(max(0, center - max_frames // 2), len(full) - max_frames)
    return full[start:start + max_frames]
