"""Objective speech metrics and the external-evaluator plugin seam."""
from __future__ import annotations

import logging
import os
import re
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import gcd
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml
from scipy.signal import resample_poly

from .errors import ConfigurationError, EvaluatorError, InputError, ProtocolError, UndefinedMetricError
from .spectral import Waveform

log = logging.getLogger(__name__)

SSNR_FLOOR_DB = -10.0
SSNR_CEIL_DB = 35.0
PLUGIN_ENV = "CISE_PLUGINS"


@dataclass
class MetricScore:
    name: str
    value: float
    utterance_id: str = ""
    group: str = "mixed"


def _check_pair(ref: Waveform, est: Waveform):
    if len(ref) != len(est):
        raise InputError(f"reference has {len(ref)} samples, estimate has {len(est)}")
    if ref.sample_rate != est.sample_rate:
        raise InputError(f"sample rates differ: {ref.sample_rate} vs {est.sample_rate}")


def ssnr(ref: Waveform, est: Waveform, frame_ms: float = 32.0) -> float:
    """Segmental SNR in dB: 50%-overlap frames, each clamped to [-10, 35] dB.

    Frames whose reference energy is below 1e-10 do not count.
    """
    _check_pair(ref, est)
    flen = int(round(frame_ms * 1e-3 * ref.sample_rate))
    hop = flen // 2
    x, y = ref.samples, est.samples
    if x.size < flen:
        raise InputError(f"signal shorter than one {frame_ms} ms frame")
    n_frames = 1 + (x.size - flen) // hop
    idx = np.arange(flen)[None, :] + hop * np.arange(n_frames)[:, None]
    sig = np.sum(x[idx] ** 2, axis=1)
    err = np.sum((x[idx] - y[idx]) ** 2, axis=1)
    keep = sig >= 1e-10
    if not np.any(keep):
        raise UndefinedMetricError("every reference frame is silent")
    with np.errstate(divide="ignore"):
        snr = 10 * np.log10(sig[keep] / err[keep])
    return float(np.mean(np.clip(snr, SSNR_FLOOR_DB, SSNR_CEIL_DB)))


# -- STOI ---------------------------------------------------------------------

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0
_EPS = np.finfo(np.float64).eps


def third_octave_bands(fs: int = STOI_FS, nfft: int = STOI_NFFT, n_bands: int = STOI_BANDS,
                       min_freq: float = STOI_MIN_FREQ) -> np.ndarray:
    """Binary (bands x bins) matrix summing DFT bins into 1/3-octave bands."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, f.size))
    for b in range(n_bands):
        lo_bin = int(np.argmin((f - lo[b]) ** 2))
        hi_bin = int(np.argmin((f - hi[b]) ** 2))
        obm[b, lo_bin:hi_bin] = 1.0
    return obm


def _stoi_window(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def _remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float, flen: int, hop: int):
    w = _stoi_window(flen)
    starts = range(0, x.size - flen, hop)
    xf = np.array([w * x[s:s + flen] for s in starts])
    yf = np.array([w * y[s:s + flen] for s in starts])
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > energy.max() - dyn_range
    xf, yf = xf[keep], yf[keep]
    n = xf.shape[0]
    x_out = np.zeros((n - 1) * hop + flen) if n else np.zeros(0)
    y_out = np.zeros_like(x_out)
    for i in range(n):
        x_out[i * hop:i * hop + flen] += xf[i]
        y_out[i * hop:i * hop + flen] += yf[i]
    return x_out, y_out


def _stft_mag(x: np.ndarray, flen: int, hop: int, nfft: int) -> np.ndarray:
    w = _stoi_window(flen)
    starts = range(0, x.size - flen, hop)
    frames = np.array([w * x[s:s + flen] for s in starts])
    return np.abs(np.fft.rfft(frames, n=nfft, axis=1)).T  # (bins, frames)


def _row_center_normalize(a: np.ndarray) -> np.ndarray:
    a = a - a.mean(axis=-1, keepdims=True)
    return a / (np.linalg.norm(a, axis=-1, keepdims=True) + _EPS)


def stoi(ref: Waveform, est: Waveform) -> float:
    """Short-time objective intelligibility (clipped 1/3-octave envelope correlation)."""
    _check_pair(ref, est)
    if ref.duration < 0.384:
        raise InputError(f"STOI needs at least 384 ms of audio, got {1000 * ref.duration:.0f} ms")
    x, y = ref.samples, est.samples
    if ref.sample_rate != STOI_FS:
        g = gcd(ref.sample_rate, STOI_FS)
        x = resample_poly(x, STOI_FS // g, ref.sample_rate // g)
        y = resample_poly(y, STOI_FS // g, ref.sample_rate // g)
    x, y = _remove_silent_frames(x, y, STOI_DYN_RANGE_DB, STOI_FRAME, STOI_FRAME // 2)
    if x.size < STOI_FRAME:
        raise UndefinedMetricError("no non-silent frames for STOI")
    obm = third_octave_bands()
    x_tob = np.sqrt(obm @ _stft_mag(x, STOI_FRAME, STOI_FRAME // 2, STOI_NFFT) ** 2)
    y_tob = np.sqrt(obm @ _stft_mag(y, STOI_FRAME, STOI_FRAME // 2, STOI_NFFT) ** 2)
    n_frames = x_tob.shape[1]
    if n_frames < STOI_SEGMENT:
        raise UndefinedMetricError(f"only {n_frames} active frames, STOI needs {STOI_SEGMENT}")
    # (segments, bands, N)
    xs = np.stack([x_tob[:, m - STOI_SEGMENT:m] for m in range(STOI_SEGMENT, n_frames + 1)])
    ys = np.stack([y_tob[:, m - STOI_SEGMENT:m] for m in range(STOI_SEGMENT, n_frames + 1)])
    scale = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + _EPS)
    ys = np.minimum(ys * scale, xs * (1 + 10 ** (-STOI_BETA_DB / 20)))
    corr = np.sum(_row_center_normalize(xs) * _row_center_normalize(ys), axis=2)
    return float(np.clip(np.mean(corr), 0.0, 1.0))


NATIVE_METRICS: dict[str, Callable[[Waveform, Waveform], float]] = {"stoi": stoi, "ssnr": ssnr}


# -- external evaluators ------------------------------------------------------

@dataclass
class PluginSpec:
    name: str
    command: str
    pattern: str = r"([-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)"
    timeout: float = 300.0


class PluginRegistry:
    """Maps metric names to external evaluator commands.

    ``command`` is a template with ``{ref}`` and ``{est}`` placeholders;
    ``pattern`` is a regex whose first group (or whole match) is the score.
    """

    def __init__(self, plugins: Optional[dict] = None, max_workers: int = 4):
        self.plugins: dict[str, PluginSpec] = {}
        self.max_workers = max_workers
        for name, spec in (plugins or {}).items():
            self.register(name, **spec)

    def register(self, name: str, command: str, pattern: Optional[str] = None, timeout: float = 300.0):
        kwargs = {"pattern": pattern} if pattern else {}
        self.plugins[name] = PluginSpec(name, command, timeout=timeout, **kwargs)

    def __contains__(self, name):
        return name in self.plugins

    def names(self) -> list[str]:
        return sorted(self.plugins)

    @classmethod
    def from_file(cls, path) -> "PluginRegistry":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        max_workers = int(raw.pop("max_workers", 4)) if isinstance(raw, dict) else 4
        plugins = raw.get("plugins", raw)
        if not isinstance(plugins, dict):
            raise ConfigurationError(f"{path}: plugin registry must be a mapping")
        return cls(plugins, max_workers)

    @classmethod
    def from_env(cls) -> "PluginRegistry":
        path = os.environ.get(PLUGIN_ENV)
        if not path:
            return cls()
        if not Path(path).exists():
            raise ConfigurationError(f"{PLUGIN_ENV} points at missing file {path}")
        return cls.from_file(path)


def external_eval(name: str, ref_path, est_path, registry: PluginRegistry,
                  utterance_id: str = "", group: str = "mixed") -> MetricScore:
    if name not in registry:
        raise ConfigurationError(f"no external evaluator registered for {name!r}")
    spec = registry.plugins[name]
    cmd = [part.format(ref=str(ref_path), est=str(est_path)) for part in shlex.split(spec.command)]
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=spec.timeout)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"evaluator for {name!r} not found: {cmd[0]}") from exc
    except subprocess.TimeoutExpired as exc:
        raise EvaluatorError(f"evaluator {name!r} timed out after {spec.timeout}s") from exc
    if proc.returncode != 0:
        raise EvaluatorError(f"evaluator {name!r} exited with {proc.returncode}: {proc.stderr.strip()[:500]}",
                             proc.returncode, proc.stderr)
    match = re.search(spec.pattern, proc.stdout)
    if not match:
        raise ProtocolError(f"evaluator {name!r} output did not match {spec.pattern!r}: {proc.stdout[:200]!r}")
    text = match.group(1) if match.groups() else match.group(0)
    try:
        value = float(text)
    except ValueError as exc:
        raise ProtocolError(f"evaluator {name!r} produced non-numeric score {text!r}") from exc
    return MetricScore(name, value, utterance_id, group)


def external_eval_batch(name: str, jobs: list[tuple[str, str, str, str]],
                        registry: PluginRegistry) -> list[MetricScore]:
    """Score ``(utt_id, group, ref_path, est_path)`` jobs concurrently.

    Failed jobs come back with a NaN value and a logged warning.
    """
    def run(job):
        utt_id, group, ref_path, est_path = job
        try:
            return external_eval(name, ref_path, est_path, registry, utt_id, group)
        except (ProtocolError, EvaluatorError) as exc:
            log.warning("%s for %s marked missing: %s", name, utt_id, exc)
            return MetricScore(name, float("nan"), utt_id, group)

    with ThreadPoolExecutor(max_workers=max(1, registry.max_workers)) as pool:
        return list(pool.map(run, jobs))
