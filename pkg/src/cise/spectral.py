"""STFT front-end: framing, analysis/synthesis, magnitude masking and wav I/O."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from .errors import InputError

EPS = 1e-8


@dataclass(frozen=True)
class FrameParams:
    fft_size: int = 1023
    win_length: int = 1023
    hop: int = 320
    window: str = "hann"

    def __post_init__(self):
        if not (0 < self.hop <= self.win_length):
            raise InputError(f"need 0 < hop <= win_length, got hop={self.hop}, win_length={self.win_length}")
        if self.win_length > self.fft_size + 1:
            raise InputError(f"win_length {self.win_length} exceeds fft_size + 1 ({self.fft_size + 1})")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            raise InputError(f"signal of {n_samples} samples is shorter than win_length={self.win_length}")
        return math.ceil((n_samples - self.win_length) / self.hop) + 1

    def analysis_window(self) -> np.ndarray:
        # periodic variant (fftbins=True)
        return get_window(self.window, self.win_length, fftbins=True).astype(np.float64)

    def to_dict(self) -> dict:
        return {"fft_size": self.fft_size, "win_length": self.win_length, "hop": self.hop, "window": self.window}


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InputError(f"waveform must be mono 1-D, got shape {self.samples.shape}")
        if self.samples.size < 1:
            raise InputError("waveform must contain at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    """One-sided complex STFT of shape (frames, bins).

    ``length`` is the sample count of the source waveform so that synthesis can
    trim the end padding.
    """

    bins: np.ndarray
    params: FrameParams = field(default_factory=FrameParams)
    length: int | None = None
    sample_rate: int = 16000

    @property
    def n_frames(self) -> int:
        return self.bins.shape[0]

    @property
    def n_bins(self) -> int:
        return self.bins.shape[1]

    @property
    def shape(self):
        return self.bins.shape

    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)

    def phase(self) -> np.ndarray:
        return np.angle(self.bins)

    def replace(self, bins: np.ndarray) -> "Spectrogram":
        return Spectrogram(bins, self.params, self.length, self.sample_rate)


def _frame(x: np.ndarray, p: FrameParams, n_frames: int) -> np.ndarray:
    idx = np.arange(p.win_length)[None, :] + p.hop * np.arange(n_frames)[:, None]
    return x[idx]


def _padded(x: np.ndarray, p: FrameParams) -> tuple[np.ndarray, int]:
    n_frames = p.n_frames(x.size)
    pad = (n_frames - 1) * p.hop + p.win_length - x.size
    if pad > 0:
        mode = "reflect" if x.size > 1 and pad < x.size else "constant"
        x = np.pad(x, (0, pad), mode=mode)
    return x, n_frames


def stft(w: Waveform, p: FrameParams | None = None) -> Spectrogram:
    p = p or FrameParams()
    x, n_frames = _padded(w.samples, p)
    frames = _frame(x, p, n_frames)
    win = p.analysis_window()
    bins = np.fft.rfft(frames * win, n=p.fft_size, axis=-1)
    return Spectrogram(bins, p, len(w), w.sample_rate)


def istft(s: Spectrogram) -> Waveform:
    p = s.params
    if s.bins.ndim != 2 or s.n_bins != p.n_bins:
        raise InputError(f"spectrogram has {s.bins.shape[-1]} bins, frame params imply {p.n_bins}")
    if s.length is not None and s.n_frames != p.n_frames(s.length):
        raise InputError(f"{s.n_frames} frames inconsistent with length {s.length} under {p}")
    frames = np.fft.irfft(s.bins, n=p.fft_size, axis=-1)[:, : p.win_length]
    if frames.shape[1] < p.win_length:
        frames = np.pad(frames, ((0, 0), (0, p.win_length - frames.shape[1])))
    win = p.analysis_window()
    total = (s.n_frames - 1) * p.hop + p.win_length
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(s.n_frames):
        sl = slice(t * p.hop, t * p.hop + p.win_length)
        out[sl] += frames[t] * win
        norm[sl] += win**2
    out = np.where(norm > 1e-10, out / np.maximum(norm, 1e-10), 0.0)
    if s.length is not None:
        out = out[: s.length]
    return Waveform(out, s.sample_rate)


def apply_mask(s: Spectrogram, m: np.ndarray) -> Spectrogram:
    """Scale magnitudes by ``m`` and keep the noisy phase."""
    m = np.asarray(m)
    if m.shape != s.bins.shape:
        raise InputError(f"mask shape {m.shape} does not match spectrogram {s.bins.shape}")
    if np.any(m < 0):
        raise InputError("magnitude mask has negative entries")
    # scaling complex bins by a real gain leaves the phase untouched
    return s.replace(s.bins * m)


def ideal_ratio_mask(clean: Spectrogram, noisy: Spectrogram) -> np.ndarray:
    return np.abs(clean.bins) / (np.abs(noisy.bins) + EPS)


def read_wav(path: str | os.PathLike) -> Waveform:
    sr, data = wavfile.read(path)
    if data.ndim != 1:
        raise InputError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise InputError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, sr)


def write_wav(path: str | os.PathLike, w: Waveform, subtype: str = "float32") -> None:
    if subtype == "float32":
        data = w.samples.astype(np.float32)
    elif subtype == "pcm16":
        data = np.round(np.clip(w.samples, -1.0, 32767 / 32768) * 32768).astype(np.int16)
    else:
        raise InputError(f"unknown wav subtype {subtype!r}")
    wavfile.write(path, w.sample_rate, data)
