"""Scoring pipeline shared by configuration evaluation and accuracy sweeps.

Both paths funnel through :func:`score_units`, so an evaluation with injected
ground truth and a sweep row at accuracy 1.0 perform the same arithmetic.
"""
from __future__ import annotations

import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import CorpusManifest, UtterancePair
from .errors import InputError, UndefinedMetricError
from .intervention import InterventionMask, corrupt_mask, detection_accuracy, load_mask, rng_for, sample_mask
from .metrics import NATIVE_METRICS, PluginRegistry, external_eval_batch
from .nnet.models import CiseModel
from .spectral import FrameParams, Waveform, istft, write_wav
from .training import Curated, curate, test_forward

log = logging.getLogger(__name__)

EVAL_MODES = ("oracle", "predicted", "random", "inverted", "vanilla")
MASK_DIR = "masks"


def curation_mask(seed: int, utt_id: str, n_frames: int, p1: float = 0.5) -> InterventionMask:
    return sample_mask(n_frames, p1, rng_for(seed, "curate", utt_id))


def test_units(corpus: CorpusManifest, fp: FrameParams, seed: int = 0, p1: float = 0.5,
               split: str = "test") -> list[Curated]:
    """Curated test mixtures; masks come from ``masks/<utt_id>.mask`` when present."""
    entries = list(corpus.split(split))
    if not entries:
        raise InputError(f"corpus has no {split!r} utterances")
    units = []
    for entry in entries:
        pair = corpus.load(entry)
        n_frames = fp.n_frames(len(pair.clean))
        path = corpus.resolve(f"{MASK_DIR}/{entry.utt_id}.mask")
        mask = load_mask(path) if path.exists() else curation_mask(seed, entry.utt_id, n_frames, p1)
        if len(mask) != n_frames:
            raise InputError(f"{entry.utt_id}: stored mask has {len(mask)} frames, expected {n_frames}")
        units.append(curate(pair, mask, fp))
    return units


@dataclass
class UnitScore:
    utt_id: str
    group: str
    da: float
    values: dict[str, float] = field(default_factory=dict)


def metric_names(registry: Optional[PluginRegistry] = None) -> list[str]:
    return list(NATIVE_METRICS) + (registry.names() if registry else [])


def score_waveforms(jobs: Sequence[tuple[str, str, Waveform, Waveform]],
                    registry: Optional[PluginRegistry] = None) -> list[dict[str, float]]:
    """Native and plugin metrics for ``(utt_id, group, ref, est)`` jobs; missing scores are NaN."""
    out = []
    for utt_id, _, ref, est in jobs:
        row = {}
        for name, fn in NATIVE_METRICS.items():
            try:
                row[name] = fn(ref, est)
            except UndefinedMetricError as exc:
                log.warning("%s undefined for %s: %s", name, utt_id, exc)
                row[name] = float("nan")
        out.append(row)
    if registry and registry.names():
        with tempfile.TemporaryDirectory() as tmp:
            files = []
            for k, (utt_id, group, ref, est) in enumerate(jobs):
                rp, ep = Path(tmp) / f"{k}_ref.wav", Path(tmp) / f"{k}_est.wav"
                write_wav(rp, ref)
                write_wav(ep, est)
                files.append((utt_id, group, str(rp), str(ep)))
            for name in registry.names():
                for row, s in zip(out, external_eval_batch(name, files, registry)):
                    row[name] = s.value
    return out


MaskChooser = Callable[[Curated], tuple[str, Optional[InterventionMask], object]]


def score_units(model: CiseModel, units: Sequence[Curated], choose: MaskChooser,
                registry: Optional[PluginRegistry] = None, group: str = "mixed") -> list[UnitScore]:
    """Enhance each unit with the (mode, injected mask, rng) from ``choose`` and score it."""
    jobs, das = [], []
    for unit in units:
        mode, injected, rng = choose(unit)
        enhanced, i_hat = test_forward(model, unit.mixed, mode, truth=unit.mask, injected=injected, seed=rng)
        das.append(detection_accuracy(unit.mask, i_hat) if i_hat is not None else float("nan"))
        ref = unit.reference if unit.reference is not None else istft(unit.clean)
        jobs.append((unit.utt_id, group, ref, istft(enhanced)))
    rows = score_waveforms(jobs, registry)
    return [UnitScore(u.utt_id, group, da, row) for u, da, row in zip(units, das, rows)]


def mode_chooser(mode: str, seed: int) -> MaskChooser:
    if mode not in EVAL_MODES:
        raise InputError(f"unknown evaluation mode {mode!r}; choose from {EVAL_MODES}")

    def choose(unit: Curated):
        if mode == "oracle":
            return "injected", unit.mask, None
        if mode == "inverted":
            return "injected", corrupt_mask(unit.mask, 0.0), None
        return mode, None, rng_for(seed, "eval", mode, unit.utt_id)

    return choose


def accuracy_chooser(p: float, seed: int, tag: str = "sweep") -> MaskChooser:
    def choose(unit: Curated):
        return "injected", corrupt_mask(unit.mask, p, rng_for(seed, tag, repr(float(p)), unit.utt_id)), None

    return choose


def frame_accuracy(units: Sequence[Curated], scores: Sequence[UnitScore]) -> float:
    """Frame-weighted detection accuracy over all units."""
    frames = np.array([len(u.mask) for u in units], dtype=np.float64)
    da = np.array([s.da for s in scores])
    if np.all(np.isnan(da)):
        return float("nan")
    return float(np.sum(da * frames) / np.sum(frames))


def mean_scores(scores: Sequence[UnitScore], names: Sequence[str]) -> dict[str, float]:
    """Per-metric mean over units with a defined score (NaN entries skipped)."""
    out = {}
    for name in names:
        vals = np.array([s.values.get(name, float("nan")) for s in scores], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        out[name] = float(np.mean(vals)) if vals.size else float("nan")
    return out
