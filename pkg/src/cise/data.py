"""Corpus handling: wav-pair ingestion, a synthetic clean/noise generator, manifests."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from math import gcd
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.signal import butter, resample_poly, sosfilt

from .errors import EmptyCorpusError, InputError
from .intervention import rng_for
from .spectral import Waveform, read_wav, write_wav

log = logging.getLogger(__name__)

TRAIN_NOISES = ("white", "brown", "tonal")
TEST_NOISES = ("pink", "bandpass")
SNR_LEVELS_DB = (0.0, 5.0, 10.0, 15.0)
CLEAN_RMS = 0.05
MANIFEST_NAME = "manifest.jsonl"


@dataclass
class UtterancePair:
    utt_id: str
    clean: Waveform
    noisy: Waveform
    snr_db: Optional[float] = None
    noise_type: Optional[str] = None

    def __post_init__(self):
        if len(self.clean) != len(self.noisy):
            raise InputError(f"{self.utt_id}: clean has {len(self.clean)} samples, noisy {len(self.noisy)}")
        if self.clean.sample_rate != self.noisy.sample_rate:
            raise InputError(
                f"{self.utt_id}: sample rates differ ({self.clean.sample_rate} vs {self.noisy.sample_rate})")

    @property
    def sample_rate(self) -> int:
        return self.clean.sample_rate


@dataclass
class ManifestEntry:
    utt_id: str
    split: str
    clean: str
    noisy: str
    snr_db: Optional[float] = None
    noise_type: Optional[str] = None
    sample_rate: Optional[int] = None
    num_samples: Optional[int] = None


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Optional[Path] = None

    def __post_init__(self):
        seen_ids, seen_paths = set(), set()
        for e in self.entries:
            if e.utt_id in seen_ids:
                raise InputError(f"duplicate utterance id {e.utt_id!r}")
            seen_ids.add(e.utt_id)
            for p in (e.clean, e.noisy):
                if p in seen_paths:
                    raise InputError(f"path listed twice in manifest: {p}")
                seen_paths.add(p)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def split(self, name: str) -> "CorpusManifest":
        return CorpusManifest([e for e in self.entries if e.split == name], self.root)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load(self, entry: ManifestEntry) -> UtterancePair:
        clean = read_wav(self.resolve(entry.clean))
        noisy = read_wav(self.resolve(entry.noisy))
        return UtterancePair(entry.utt_id, clean, noisy, entry.snr_db, entry.noise_type)

    def pairs(self) -> Iterable[UtterancePair]:
        for e in self.entries:
            yield self.load(e)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | os.PathLike, check_files: bool = True) -> "CorpusManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        with open(path) as fh:
            entries = [ManifestEntry(**json.loads(line)) for line in fh if line.strip()]
        manifest = cls(entries, path.parent)
        if check_files:
            for e in entries:
                for p in (e.clean, e.noisy):
                    if not manifest.resolve(p).exists():
                        raise InputError(f"manifest references missing file {p}")
        return manifest


def resample(w: Waveform, target_sr: int) -> Waveform:
    if target_sr == w.sample_rate:
        return w
    g = gcd(w.sample_rate, target_sr)
    return Waveform(resample_poly(w.samples, target_sr // g, w.sample_rate // g), target_sr)


def _wav_files(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.glob("*.wav"))}


def ingest(clean_dir, noisy_dir, out_dir=None, split: str = "train",
           resample_to: Optional[int] = None) -> CorpusManifest:
    """Pair ``clean_dir`` and ``noisy_dir`` wavs by file stem.

    Length mismatches are trimmed to the shorter signal. When ``resample_to`` is
    set (or trimming is needed) the processed pair is written under ``out_dir``.
    """
    clean_files = _wav_files(Path(clean_dir))
    noisy_files = _wav_files(Path(noisy_dir))
    for stem in sorted(set(clean_files) ^ set(noisy_files)):
        side = "clean" if stem in clean_files else "noisy"
        log.warning("excluding %s: only present in the %s directory", stem, side)
    stems = sorted(set(clean_files) & set(noisy_files))
    if not stems:
        raise EmptyCorpusError(f"no matching wav stems between {clean_dir} and {noisy_dir}")

    root = Path(out_dir) if out_dir is not None else None
    entries = []
    for stem in stems:
        clean = read_wav(clean_files[stem])
        noisy = read_wav(noisy_files[stem])
        if clean.sample_rate != noisy.sample_rate:
            raise InputError(f"{stem}: sample rate mismatch ({clean.sample_rate} vs {noisy.sample_rate})")
        clean_path, noisy_path = str(clean_files[stem].resolve()), str(noisy_files[stem].resolve())
        rewrite = False
        if len(clean) != len(noisy):
            log.warning("%s: trimming to %d samples (clean %d, noisy %d)",
                        stem, min(len(clean), len(noisy)), len(clean), len(noisy))
            n = min(len(clean), len(noisy))
            clean, noisy = Waveform(clean.samples[:n], clean.sample_rate), Waveform(noisy.samples[:n], noisy.sample_rate)
            rewrite = True
        if resample_to and resample_to != clean.sample_rate:
            clean, noisy = resample(clean, resample_to), resample(noisy, resample_to)
            rewrite = True
        if rewrite:
            if root is None:
                raise InputError(f"{stem}: processed audio needs an output directory")
            for sub, w in (("clean", clean), ("noisy", noisy)):
                (root / sub).mkdir(parents=True, exist_ok=True)
                write_wav(root / sub / f"{stem}.wav", w)
            clean_path, noisy_path = f"clean/{stem}.wav", f"noisy/{stem}.wav"
        entries.append(ManifestEntry(stem, split, clean_path, noisy_path,
                                     sample_rate=clean.sample_rate, num_samples=len(clean)))
    return CorpusManifest(entries, root)


# -- synthetic corpus ---------------------------------------------------------

def synth_clean(rng: np.random.Generator, n_samples: int, sample_rate: int) -> np.ndarray:
    """2-4 harmonic complexes with slow syllable-rate amplitude modulation."""
    t = np.arange(n_samples) / sample_rate
    nyq = sample_rate / 2
    out = np.zeros(n_samples)
    for _ in range(rng.integers(2, 5)):
        f0 = rng.uniform(100.0, 350.0)
        n_harm = int(min(rng.integers(4, 13), (0.8 * nyq) // f0))
        tone = np.zeros(n_samples)
        for h in range(1, n_harm + 1):
            tone += (rng.uniform(0.3, 1.0) / h) * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
        rate = rng.uniform(2.0, 6.0)
        env = 0.5 * (1 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))) ** 2
        out += env * tone
    return out * (CLEAN_RMS / np.sqrt(np.mean(out**2)))


def synth_noise(rng: np.random.Generator, kind: str, n_samples: int, sample_rate: int) -> np.ndarray:
    if kind == "white":
        return rng.standard_normal(n_samples)
    if kind in ("pink", "brown"):
        spec = np.fft.rfft(rng.standard_normal(n_samples))
        f = np.fft.rfftfreq(n_samples, 1 / sample_rate)
        f[0] = f[1]
        spec /= np.sqrt(f) if kind == "pink" else f
        return np.fft.irfft(spec, n=n_samples)
    if kind == "bandpass":
        lo = rng.uniform(300.0, 1500.0)
        hi = min(lo * rng.uniform(2.0, 4.0), 0.45 * sample_rate)
        sos = butter(4, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
        return sosfilt(sos, rng.standard_normal(n_samples))
    if kind == "tonal":
        t = np.arange(n_samples) / sample_rate
        lo = rng.uniform(200.0, 2000.0)
        freqs = rng.uniform(lo, lo * 3, size=rng.integers(20, 41))
        x = np.zeros(n_samples)
        for f in freqs:
            x += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        return x
    raise InputError(f"unknown noise type {kind!r}")


def scale_to_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    gain = np.sqrt(np.sum(clean**2) / (np.sum(noise**2) * 10 ** (snr_db / 10)))
    return noise * gain


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    return float(10 * np.log10(np.sum(clean**2) / np.sum((noisy - clean) ** 2)))


def synth_pair(seed: int, utt_id: str, split: str, duration_s: float, sample_rate: int) -> UtterancePair:
    rng = rng_for(seed, "synth", utt_id)
    n = int(round(duration_s * sample_rate))
    clean = synth_clean(rng, n, sample_rate)
    kind = str(rng.choice(TRAIN_NOISES if split == "train" else TEST_NOISES))
    snr = float(rng.choice(SNR_LEVELS_DB))
    noise = scale_to_snr(clean, synth_noise(rng, kind, n, sample_rate), snr)
    return UtterancePair(utt_id, Waveform(clean, sample_rate), Waveform(clean + noise, sample_rate), snr, kind)


def synth_corpus(n_utts: int = 200, duration_s: float = 4.0, sample_rate: int = 16000, seed: int = 7,
                 out_dir=None, test_fraction: float = 0.2, n_test: Optional[int] = None) -> CorpusManifest:
    """Deterministic synthetic corpus; the test split draws from held-out noise types.

    With ``out_dir`` the wavs are written as float32 files and referenced by
    relative path, otherwise the manifest only describes what would be generated.
    """
    if n_utts < 1:
        raise InputError("n_utts must be >= 1")
    if n_test is None:
        n_test = int(round(n_utts * test_fraction))
    n_train = n_utts - n_test
    root = Path(out_dir) if out_dir is not None else None
    entries = []
    for k in range(n_utts):
        split = "train" if k < n_train else "test"
        utt_id = f"{split}_{k:04d}"
        pair = synth_pair(seed, utt_id, split, duration_s, sample_rate)
        clean_path, noisy_path = f"clean/{utt_id}.wav", f"noisy/{utt_id}.wav"
        if root is not None:
            for sub, w in (("clean", pair.clean), ("noisy", pair.noisy)):
                (root / sub).mkdir(parents=True, exist_ok=True)
                write_wav(root / sub / f"{utt_id}.wav", w)
        entries.append(ManifestEntry(utt_id, split, clean_path, noisy_path, pair.snr_db, pair.noise_type,
                                     sample_rate, len(pair.clean)))
    manifest = CorpusManifest(entries, root)
    if root is not None:
        manifest.save(root / MANIFEST_NAME)
    return manifest
