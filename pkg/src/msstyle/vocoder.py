"""Placeholder waveform inversion (Griffin-Lim). Plumbing only; quality is not a goal."""

from __future__ import annotations

import numpy as np
from scipy.signal import get_window

from msstyle.corpus.features import mel_filterbank
from msstyle.corpus.types import MelConfig


def _stft(x, config: MelConfig, window):
    n, hop = config.frame_size, config.hop_size
    x = np.pad(x, n // 2, mode="reflect" if len(x) > n // 2 else "constant")
    T = 1 + (len(x) - n) // hop
    idx = np.arange(n)[None, :] + hop * np.arange(T)[:, None]
    return np.fft.rfft(x[idx] * window, axis=-1)


def _istft(spec, config: MelConfig, window, length: int):
    n, hop = config.frame_size, config.hop_size
    frames = np.fft.irfft(spec, n=n, axis=-1) * window
    out = np.zeros(hop * (len(spec) - 1) + n)
    norm = np.zeros_like(out)
    for t, f in enumerate(frames):
        out[t * hop:t * hop + n] += f
        norm[t * hop:t * hop + n] += window ** 2
    out /= np.maximum(norm, 1e-8)
    return out[n // 2:n // 2 + length]


def griffin_lim(logmel: np.ndarray, config: MelConfig | None = None, n_iter: int = 32, seed: int = 0) -> np.ndarray:
    """Invert a log-mel spectrogram to audio via a pseudo-inverse filterbank and Griffin-Lim."""
    config = config or MelConfig()
    fb = mel_filterbank(config)
    mag = np.maximum(np.exp(np.asarray(logmel, dtype=np.float64)) @ np.linalg.pinv(fb).T, 0.0)
    window = get_window("hann", config.frame_size, fftbins=True)
    length = (len(mag) - 1) * config.hop_size
    phase = np.exp(2j * np.pi * np.random.default_rng(seed).random(mag.shape))
    x = _istft(mag * phase, config, window, length)
    for _ in range(n_iter):
        spec = _stft(x, config, window)[: len(mag)]
        if len(spec) < len(mag):
            spec = np.pad(spec, ((0, len(mag) - len(spec)), (0, 0)))
        x = _istft(mag * np.exp(1j * np.angle(spec)), config, window, length)
    peak = np.max(np.abs(x))
    return (x / peak * 0.9 if peak > 0 else x).astype(np.float32)
