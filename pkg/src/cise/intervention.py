"""Frame-level intervention masks: sampling, expansion, mixing and corruption."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .spectral import Spectrogram

SOURCES = ("ground_truth", "predicted", "corrupted", "random")


@dataclass
class InterventionMask:
    labels: np.ndarray
    source: str = "ground_truth"

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise InputError(f"intervention mask must be 1-D, got shape {labels.shape}")
        if labels.size and not np.all((labels == 0) | (labels == 1)):
            raise InputError("intervention mask entries must be 0 or 1")
        self.labels = labels.astype(np.int8)
        if self.source not in SOURCES:
            raise InputError(f"unknown mask source {self.source!r}")

    def __len__(self):
        return self.labels.size

    def __eq__(self, other):
        if not isinstance(other, InterventionMask):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)

    def inverted(self) -> "InterventionMask":
        return InterventionMask(1 - self.labels, "corrupted")


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``; stable across processes and call order."""
    digest = hashlib.sha256(repr((int(seed),) + tuple(str(k) for k in keys)).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_mask(n_frames: int, p1: float = 0.5, seed=0) -> InterventionMask:
    if n_frames <= 0:
        raise InputError(f"frame count must be positive, got {n_frames}")
    if not 0.0 <= p1 <= 1.0:
        raise InputError(f"p1 must lie in [0, 1], got {p1}")
    rng = _as_rng(seed)
    return InterventionMask((rng.random(n_frames) < p1).astype(np.int8), "ground_truth")


def random_mask(n_frames: int, p1: float = 0.5, seed=0) -> InterventionMask:
    m = sample_mask(n_frames, p1, seed)
    return InterventionMask(m.labels, "random")


def expand_mask(m: InterventionMask, n_bins: int) -> np.ndarray:
    if n_bins < 1:
        raise InputError(f"bin count must be >= 1, got {n_bins}")
    return np.repeat(m.labels[:, None], n_bins, axis=1)


def mix(clean: Spectrogram, noisy: Spectrogram, m: InterventionMask) -> Spectrogram:
    """Frame t comes from ``clean`` where m[t] == 0 and from ``noisy`` where m[t] == 1."""
    if clean.bins.shape != noisy.bins.shape:
        raise InputError(f"clean {clean.bins.shape} and noisy {noisy.bins.shape} spectrograms differ in shape")
    if clean.params != noisy.params:
        raise InputError("clean and noisy spectrograms use different frame parameters")
    if len(m) != clean.n_frames:
        raise InputError(f"mask has {len(m)} frames, spectrogram has {clean.n_frames}")
    # select rather than blend arithmetically so both sources come through bit-exact
    sel = m.labels.astype(bool)[:, None]
    return clean.replace(np.where(sel, noisy.bins, clean.bins))


def corrupt_mask(i: InterventionMask, p: float, seed=0) -> InterventionMask:
    """Keep each label with probability ``p``, flip it otherwise."""
    if not 0.0 <= p <= 1.0:
        raise InputError(f"accuracy p must lie in [0, 1], got {p}")
    rng = _as_rng(seed)
    # uniform draws lie in [0, 1): p=1 never flips, p=0 always flips
    flip = rng.random(len(i)) >= p
    return InterventionMask(np.where(flip, 1 - i.labels, i.labels), "corrupted")


def detection_accuracy(i: InterventionMask, i_hat: InterventionMask) -> float:
    a = i.labels if isinstance(i, InterventionMask) else np.asarray(i)
    b = i_hat.labels if isinstance(i_hat, InterventionMask) else np.asarray(i_hat)
    if a.shape != b.shape:
        raise InputError(f"mask lengths differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise InputError("cannot score empty masks")
    return float(np.mean(a == b))


def save_mask(path: str | os.PathLike, m: InterventionMask) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(str(int(v)) for v in m.labels))
        fh.write("\n")


def load_mask(path: str | os.PathLike, source: str = "ground_truth") -> InterventionMask:
    with open(path) as fh:
        labels = [int(line) for line in fh if line.strip()]
    return InterventionMask(np.array(labels, dtype=np.int8), source)
