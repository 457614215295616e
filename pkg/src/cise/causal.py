"""Average treatment effects for speech metrics and the controlled-accuracy sweep."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import CorpusManifest
from .errors import InputError, StateError, UndefinedATEError, UndefinedMetricError
from .evaluation import (UnitScore, accuracy_chooser, frame_accuracy, mean_scores, metric_names, score_units,
                         score_waveforms, test_units)
from .intervention import InterventionMask, corrupt_mask, rng_for
from .metrics import NATIVE_METRICS, MetricScore, PluginRegistry
from .spectral import FrameParams, Waveform, istft, stft
from .training import TrainState, test_forward

log = logging.getLogger(__name__)

TREATMENT, CONTROL = "treatment", "control"


@dataclass
class AteReport:
    metric: str
    treatment_mean: float
    control_mean: float
    ate: float
    n_treatment: int
    n_control: int
    scores: list[MetricScore] = field(default_factory=list, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"metric": self.metric, "treatment_mean": self.treatment_mean, "control_mean": self.control_mean,
                "ate": self.ate, "n_treatment": self.n_treatment, "n_control": self.n_control}


def ate(outcomes_treatment: Sequence[float], outcomes_control: Sequence[float], metric: str = "y") -> AteReport:
    """Difference of group means, E[y | i=1] - E[y | i=0]."""
    t = [float(v) for v in outcomes_treatment]
    c = [float(v) for v in outcomes_control]
    if not t or not c:
        raise UndefinedATEError(f"ATE needs both groups nonempty (treatment={len(t)}, control={len(c)})")
    t_mean = math.fsum(t) / len(t)
    c_mean = math.fsum(c) / len(c)
    return AteReport(metric, t_mean, c_mean, t_mean - c_mean, len(t), len(c))


@dataclass
class PlaceboResult:
    observed_ate: float
    placebo_ate: float
    null_quantile: float
    p_value: float

    @property
    def passed(self) -> bool:
        return abs(self.placebo_ate) <= self.null_quantile


def placebo_test(outcomes_treatment: Sequence[float], outcomes_control: Sequence[float],
                 n_permutations: int = 1000, seed: int = 0, quantile: float = 0.95) -> PlaceboResult:
    """Permutation refutation: shuffled group labels should carry no effect.

    ``placebo_ate`` is the ATE under one random relabelling; it passes when its
    magnitude sits below the ``quantile`` of the permutation null of |ATE|.
    """
    pooled = np.concatenate([np.asarray(outcomes_treatment, float), np.asarray(outcomes_control, float)])
    n_t = len(outcomes_treatment)
    if n_t == 0 or n_t == pooled.size:
        raise UndefinedATEError("placebo test needs both groups nonempty")
    rng = rng_for(seed, "placebo")
    null = np.empty(n_permutations)
    for k in range(n_permutations):
        perm = rng.permutation(pooled)
        null[k] = perm[:n_t].mean() - perm[n_t:].mean()
    perm = rng.permutation(pooled)
    placebo = float(perm[:n_t].mean() - perm[n_t:].mean())
    observed = ate(outcomes_treatment, outcomes_control).ate
    q = float(np.quantile(np.abs(null), quantile))
    p_value = float((1 + np.sum(np.abs(null) >= abs(observed))) / (1 + n_permutations))
    return PlaceboResult(observed, placebo, q, p_value)


# -- unit-level ATE for speech metrics ----------------------------------------

@dataclass
class AteUnit:
    """A whole utterance with constant intervention: noisy input (treatment) or clean input (control)."""

    utt_id: str
    group: str
    clean: Waveform
    input: Waveform
    mask: InterventionMask


Enhancer = Callable[[Waveform, AteUnit], Waveform]


def ate_units(corpus: CorpusManifest, fp: FrameParams, seed: int = 0, split: str = "test") -> list[AteUnit]:
    """Seeded 50/50 split of ``split`` utterances into all-treated and all-control units."""
    entries = list(corpus.split(split))
    if len(entries) < 2:
        raise InputError(f"need at least two {split!r} utterances for an ATE split")
    order = rng_for(seed, "ate_split").permutation(len(entries))
    treated = set(order[: len(entries) // 2].tolist())
    units = []
    for k, entry in enumerate(entries):
        pair = corpus.load(entry)
        n_frames = fp.n_frames(len(pair.clean))
        if k in treated:
            units.append(AteUnit(entry.utt_id, TREATMENT, pair.clean, pair.noisy,
                                 InterventionMask(np.ones(n_frames, np.int8))))
        else:
            units.append(AteUnit(entry.utt_id, CONTROL, pair.clean, pair.clean,
                                 InterventionMask(np.zeros(n_frames, np.int8))))
    return units


def ate_metric(metric: str | Callable[[Waveform, Waveform], float], units: Sequence[AteUnit],
               enhancer: Enhancer, name: Optional[str] = None) -> AteReport:
    """E[M(clean, E(noisy)) | treated] - E[M(clean, E(clean)) | control].

    Units whose metric is undefined are dropped with a warning.
    """
    fn = NATIVE_METRICS[metric] if isinstance(metric, str) else metric
    name = name or (metric if isinstance(metric, str) else getattr(metric, "__name__", "metric"))
    scores = []
    for unit in units:
        try:
            value = fn(unit.clean, enhancer(unit.input, unit))
        except UndefinedMetricError as exc:
            log.warning("excluding %s from ATE_%s: %s", unit.utt_id, name, exc)
            continue
        scores.append(MetricScore(name, value, unit.utt_id, unit.group))
    return ate_from_scores(scores, name)


def ate_from_scores(scores: Sequence[MetricScore], name: str) -> AteReport:
    t = [s.value for s in scores if s.group == TREATMENT and not math.isnan(s.value)]
    c = [s.value for s in scores if s.group == CONTROL and not math.isnan(s.value)]
    report = ate(t, c, name)
    report.scores = list(scores)
    return report


def identity_enhancer(x: Waveform, unit: AteUnit) -> Waveform:
    return x


def oracle_enhancer(x: Waveform, unit: AteUnit) -> Waveform:
    return unit.clean


class ModelEnhancer:
    """Runs the test-time pipeline on a unit.

    ``accuracy`` set: the unit's constant ground-truth mask corrupted to that
    accuracy is injected. Otherwise ``mode`` (predicted/random/vanilla) decides.
    """

    def __init__(self, state: TrainState, fp: FrameParams, accuracy: Optional[float] = None,
                 mode: str = "predicted", seed: int = 0):
        self.model = state.model
        self.fp = fp
        self.accuracy = accuracy
        self.mode = mode
        self.seed = seed

    def __call__(self, x: Waveform, unit: AteUnit) -> Waveform:
        spec = stft(x, self.fp)
        if self.accuracy is not None:
            rng = rng_for(self.seed, "ate", repr(float(self.accuracy)), unit.utt_id)
            injected = corrupt_mask(unit.mask, self.accuracy, rng)
            enhanced, _ = test_forward(self.model, spec, "injected", injected=injected)
        else:
            enhanced, _ = test_forward(self.model, spec, self.mode, truth=unit.mask,
                                       seed=rng_for(self.seed, "ate", self.mode, unit.utt_id))
        return istft(enhanced)


def ate_all_metrics(units: Sequence[AteUnit], enhancer: Enhancer,
                    registry: Optional[PluginRegistry] = None) -> dict[str, AteReport]:
    """Enhance each unit once and compute every metric's ATE from the same outputs."""
    jobs = [(u.utt_id, u.group, u.clean, enhancer(u.input, u)) for u in units]
    rows = score_waveforms(jobs, registry)
    reports = {}
    for name in metric_names(registry):
        scores = [MetricScore(name, row[name], u.utt_id, u.group) for u, row in zip(units, rows)]
        reports[name] = ate_from_scores(scores, name)
    return reports


# -- controlled-accuracy sweep --------------------------------------------------

@dataclass
class SweepRow:
    p: float
    da: float
    means: dict[str, float]
    ates: dict[str, float]
    scores: list[UnitScore] = field(default_factory=list, repr=False)


@dataclass
class SweepResult:
    rows: list[SweepRow]
    seed: int
    checkpoint: str = ""

    @property
    def grid(self) -> list[float]:
        return [r.p for r in self.rows]

    def metrics(self) -> list[str]:
        return list(self.rows[0].means) if self.rows else []


def accuracy_sweep(state: TrainState, corpus: CorpusManifest, grid: Sequence[float], seed: int = 0,
                   registry: Optional[PluginRegistry] = None, fp: Optional[FrameParams] = None,
                   checkpoint: str = "", units=None, ate_unit_list=None) -> SweepResult:
    """Score the test split with ground truth corrupted to each accuracy ``p``.

    Mixed test units give the per-row metric means and detection accuracy;
    constant-intervention units give the per-row ATEs, with the enhancer using
    the same p-corrupted masks on both groups.
    """
    if state is None or not state.trained:
        raise StateError("accuracy sweep needs a trained state")
    grid = sorted(float(p) for p in grid)
    if not grid or any(not 0.0 <= p <= 1.0 for p in grid):
        raise InputError(f"grid must be a nonempty subset of [0, 1], got {grid}")
    fp = fp or state.model.cfg.frame_params
    units = units if units is not None else test_units(corpus, fp, seed)
    ate_unit_list = ate_unit_list if ate_unit_list is not None else ate_units(corpus, fp, seed)
    names = metric_names(registry)
    rows = []
    for p in grid:
        scores = score_units(state.model, units, accuracy_chooser(p, seed), registry)
        reports = ate_all_metrics(ate_unit_list, ModelEnhancer(state, fp, accuracy=p, seed=seed), registry)
        ates = {n: reports[n].ate for n in names}
        rows.append(SweepRow(p, frame_accuracy(units, scores), mean_scores(scores, names), ates, scores))
    return SweepResult(rows, seed, checkpoint)
