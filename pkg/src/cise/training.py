"""Training loop: intervention curation, EM switching, multitask loss, checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .data import CorpusManifest, UtterancePair
from .errors import InputError, NonFiniteLossError, StateError
from .intervention import InterventionMask, corrupt_mask, load_mask, mix, random_mask, rng_for, sample_mask
from .nnet.models import CiseModel, ModelConfig, predict_intervention
from .spectral import FrameParams, Spectrogram, Waveform, istft, stft

log = logging.getLogger(__name__)

LOSS_HEADER = ("step", "l1", "ce", "total")
PARTS = ("em0", "em1", "detector", "vanilla")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    p1: float = 0.5
    l1_weight: float = 1.0
    ce_weight: float = 1.0
    mask_resampling: str = "fresh"
    checkpoint_every: int = 500
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InputError(f"learning rate must be nonnegative, got {self.learning_rate}")
        self.betas = tuple(float(b) for b in self.betas)
        if len(self.betas) != 2 or not all(0.0 < b < 1.0 for b in self.betas):
            raise InputError(f"Adam moment decays must lie in (0, 1), got {self.betas}")
        if self.mask_resampling not in ("fresh", "fixed"):
            raise InputError(f"mask_resampling must be 'fresh' or 'fixed', got {self.mask_resampling!r}")
        if not 0.0 <= self.p1 <= 1.0:
            raise InputError(f"p1 must lie in [0, 1], got {self.p1}")
        if self.batch_size < 1 or self.steps < 0:
            raise InputError("batch_size must be >= 1 and steps >= 0")

    @property
    def frame_params(self) -> FrameParams:
        return self.model.frame_params

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"]) if isinstance(d["model"], dict) else d["model"]
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainState:
    model: CiseModel
    optimizers: dict[str, torch.optim.Optimizer]
    step: int = 0
    history: list[tuple[int, float, float, float]] = field(default_factory=list)
    vanilla_history: list[tuple[int, float]] = field(default_factory=list)
    seed: int = 0
    elapsed_s: float = 0.0

    @property
    def trained(self) -> bool:
        return self.step > 0


def init_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(int(rng_for(cfg.seed, "init").integers(2**31)))
    model = CiseModel(cfg.model)
    return TrainState(model, make_optimizers(model, cfg), seed=cfg.seed)


def make_optimizers(model: CiseModel, cfg: TrainConfig) -> dict[str, torch.optim.Optimizer]:
    return {name: torch.optim.Adam(part.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
            for name, part in model.parts().items()}


# -- curation and batching ----------------------------------------------------

@dataclass
class Curated:
    utt_id: str
    clean: Spectrogram
    noisy: Spectrogram
    mixed: Spectrogram
    mask: InterventionMask
    reference: Optional[Waveform] = None

    @property
    def mixed_wave(self) -> Waveform:
        return istft(self.mixed)


def curate(pair: UtterancePair, mask: InterventionMask, fp: FrameParams) -> Curated:
    clean, noisy = stft(pair.clean, fp), stft(pair.noisy, fp)
    return Curated(pair.utt_id, clean, noisy, mix(clean, noisy, mask), mask, pair.clean)


def training_mask(cfg: TrainConfig, utt_id: str, n_frames: int, epoch: int) -> InterventionMask:
    key = 0 if cfg.mask_resampling == "fixed" else epoch
    return sample_mask(n_frames, cfg.p1, rng_for(cfg.seed, "mask", utt_id, key))


@dataclass
class Batch:
    ids: list[str]
    clean_mag: Tensor
    mix_mag: Tensor
    mix_wav: Tensor
    labels: Tensor
    pad_mask: Tensor
    n_frames: list[int]

    @property
    def valid(self) -> Tensor:
        return ~self.pad_mask


def collate(items: Sequence[Curated], dtype=torch.float32) -> Batch:
    """Pad to the longest utterance; ``pad_mask`` is True on padded frames."""
    t_max = max(c.mixed.n_frames for c in items)
    n_bins = items[0].mixed.n_bins
    waves = [c.mixed_wave.samples for c in items]
    n_max = max(w.size for w in waves)
    b = len(items)
    clean_mag = np.zeros((b, t_max, n_bins))
    mix_mag = np.zeros((b, t_max, n_bins))
    mix_wav = np.zeros((b, n_max))
    labels = np.zeros((b, t_max), dtype=np.int64)
    pad = np.ones((b, t_max), dtype=bool)
    for k, (c, w) in enumerate(zip(items, waves)):
        t = c.mixed.n_frames
        clean_mag[k, :t] = c.clean.magnitude()
        mix_mag[k, :t] = c.mixed.magnitude()
        mix_wav[k, : w.size] = w
        labels[k, :t] = c.mask.labels
        pad[k, :t] = False
    return Batch([c.utt_id for c in items], torch.as_tensor(clean_mag, dtype=dtype),
                 torch.as_tensor(mix_mag, dtype=dtype), torch.as_tensor(mix_wav, dtype=dtype),
                 torch.as_tensor(labels), torch.as_tensor(pad), [c.mixed.n_frames for c in items])


# -- forward passes and losses --------------------------------------------------

def switch_masks(model: CiseModel, mix_mag: Tensor, switch: Tensor, pad_mask: Optional[Tensor] = None) -> Tensor:
    """Per-frame gain from EM0 where ``switch`` is 0 and EM1 where it is 1."""
    m0 = model.em0(mix_mag, pad_mask)
    m1 = model.em1(mix_mag, pad_mask)
    return torch.where(switch[..., None].bool(), m1, m0)


def enhance_batch(model: CiseModel, batch: Batch, switch: Tensor) -> Tensor:
    return switch_masks(model, batch.mix_mag, switch, batch.pad_mask) * batch.mix_mag


def detector_logits(model: CiseModel, batch: Batch) -> Tensor:
    return model.detector.logits(batch.mix_wav, max(batch.n_frames), pad_mask=batch.pad_mask)


def l1_loss(clean_mag: Tensor, enhanced_mag: Tensor, valid: Optional[Tensor] = None) -> Tensor:
    diff = (enhanced_mag - clean_mag).abs()
    if valid is None:
        return diff.mean()
    v = valid[..., None].to(diff.dtype)
    return (diff * v).sum() / (v.sum() * diff.shape[-1])


def ce_from_logits(logits: Tensor, labels: Tensor, valid: Optional[Tensor] = None) -> Tensor:
    ce = torch.nn.functional.cross_entropy(logits.transpose(1, 2), labels, reduction="none")
    if valid is None:
        return ce.mean()
    v = valid.to(ce.dtype)
    return (ce * v).sum() / v.sum()


def total_loss(clean_mag, enhanced_mag, labels, probs, valid=None,
               l1_weight: float = 1.0, ce_weight: float = 1.0) -> tuple[Tensor, Tensor, Tensor]:
    """``(total, l1, ce)`` where ce is the per-frame cross-entropy of ``probs`` against one-hot labels."""
    clean_mag, enhanced_mag, probs = (torch.as_tensor(np.asarray(a) if not isinstance(a, Tensor) else a)
                                      for a in (clean_mag, enhanced_mag, probs))
    labels = torch.as_tensor(labels.labels if isinstance(labels, InterventionMask) else labels).long()
    if probs.shape[:-1] != labels.shape or probs.shape[-1] != 2:
        raise InputError(f"probabilities {tuple(probs.shape)} do not match labels {tuple(labels.shape)}")
    if clean_mag.shape != enhanced_mag.shape:
        raise InputError(f"magnitude shapes differ: {tuple(clean_mag.shape)} vs {tuple(enhanced_mag.shape)}")
    l1 = l1_loss(clean_mag, enhanced_mag, valid)
    picked = probs.gather(-1, labels[..., None])[..., 0]
    ce = -torch.log(picked.clamp_min(1e-12))
    ce = ce.mean() if valid is None else (ce * valid).sum() / valid.sum()
    return l1_weight * l1 + ce_weight * ce, l1, ce


def train_forward(model: CiseModel, cur: Curated) -> tuple[Spectrogram, Tensor]:
    """Ground-truth switching for one curated utterance: (enhanced spectrogram, detector probs)."""
    if len(cur.mask) != cur.mixed.n_frames:
        raise InputError(f"mask has {len(cur.mask)} frames, spectrogram has {cur.mixed.n_frames}")
    batch = collate([cur], _dtype(model))
    gain = switch_masks(model, batch.mix_mag, batch.labels, batch.pad_mask)[0]
    probs = torch.softmax(detector_logits(model, batch), dim=-1)[0]
    return _apply_gain(cur.mixed, gain), probs


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def _apply_gain(s: Spectrogram, gain: Tensor) -> Spectrogram:
    g = gain.detach().cpu().numpy().astype(np.float64)
    return s.replace(s.bins * g)


def _check_finite(state: TrainState, batch: Batch, values: dict, dump_dir: Optional[Path]):
    bad = [k for k, v in values.items() if not torch.isfinite(v).all()]
    if not bad:
        return
    batch_id = f"step{state.step}:" + ",".join(batch.ids)
    dump_path = None
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
        dump_path = dump_dir / f"nonfinite_step{state.step}.pt"
        torch.save({"ids": batch.ids, "mix_mag": batch.mix_mag, "clean_mag": batch.clean_mag,
                    "labels": batch.labels, "losses": {k: v.detach() for k, v in values.items()}}, dump_path)
    raise NonFiniteLossError(f"non-finite {', '.join(bad)} on batch {batch_id}", batch_id, dump_path)


def train_step(batch: Batch, state: TrainState, cfg: TrainConfig, dump_dir: Optional[Path] = None) -> TrainState:
    """One update: EMs descend the L1 loss, the detector descends the CE loss.

    The two losses have disjoint parameter sets and are back-propagated
    separately, so neither gradient reaches the other's parameters.
    """
    model = state.model
    model.train()
    for opt in state.optimizers.values():
        opt.zero_grad(set_to_none=True)
    valid = batch.valid
    enhanced = enhance_batch(model, batch, batch.labels)
    l1 = l1_loss(batch.clean_mag, enhanced, valid)
    ce = ce_from_logits(detector_logits(model, batch), batch.labels, valid)
    values = {"l1": l1, "ce": ce}
    vanilla_l1 = None
    if model.vanilla is not None:
        vanilla_l1 = l1_loss(batch.clean_mag, model.vanilla(batch.mix_mag, batch.pad_mask) * batch.mix_mag, valid)
        values["vanilla_l1"] = vanilla_l1
    _check_finite(state, batch, values, dump_dir)

    (cfg.l1_weight * l1).backward()
    (cfg.ce_weight * ce).backward()
    if vanilla_l1 is not None:
        (cfg.l1_weight * vanilla_l1).backward()
    for opt in state.optimizers.values():
        opt.step()

    state.step += 1
    l1_v, ce_v = l1.item(), ce.item()
    state.history.append((state.step, l1_v, ce_v, cfg.l1_weight * l1_v + cfg.ce_weight * ce_v))
    if vanilla_l1 is not None:
        state.vanilla_history.append((state.step, vanilla_l1.item()))
    return state


class EpochSampler:
    """Deterministic batches over the train split, reshuffled and re-masked every epoch."""

    def __init__(self, corpus: CorpusManifest, cfg: TrainConfig, cache: bool = True):
        self.entries = list(corpus.split("train")) or list(corpus)
        if not self.entries:
            raise InputError("training corpus is empty")
        self.corpus = corpus
        self.cfg = cfg
        self._cache: dict[str, UtterancePair] = {}
        self.use_cache = cache

    def pair(self, entry) -> UtterancePair:
        if entry.utt_id in self._cache:
            return self._cache[entry.utt_id]
        p = self.corpus.load(entry)
        if self.use_cache:
            self._cache[entry.utt_id] = p
        return p

    def batch(self, step: int) -> Batch:
        """Batch number ``step`` (0-based); independent of call order."""
        bs = min(self.cfg.batch_size, len(self.entries))
        per_epoch = max(1, len(self.entries) // bs)
        epoch, k = divmod(step, per_epoch)
        order = rng_for(self.cfg.seed, "order", epoch).permutation(len(self.entries))
        items = []
        for idx in order[k * bs:(k + 1) * bs]:
            entry = self.entries[idx]
            pair = self.pair(entry)
            n_frames = self.cfg.frame_params.n_frames(len(pair.clean))
            items.append(curate(pair, training_mask(self.cfg, entry.utt_id, n_frames, epoch), self.cfg.frame_params))
        return collate(items)


def write_loss_csv(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_HEADER)
        for step, l1, ce, total in history:
            w.writerow([step, repr(l1), repr(ce), repr(total)])


def train(cfg: TrainConfig, corpus: CorpusManifest, out_dir=None, state: Optional[TrainState] = None,
          progress: Optional[Callable[[TrainState], None]] = None, log_every: int = 100) -> TrainState:
    """Run ``cfg.steps`` updates, writing ``loss.csv`` and periodic checkpoints under ``out_dir``."""
    out = Path(out_dir) if out_dir is not None else None
    state = state or init_state(cfg)
    sampler = EpochSampler(corpus, cfg)
    torch.manual_seed(int(rng_for(cfg.seed, "dropout", state.step).integers(2**31)))
    t0 = time.perf_counter()
    while state.step < cfg.steps:
        batch = sampler.batch(state.step)
        train_step(batch, state, cfg, dump_dir=out)
        if log_every and state.step % log_every == 0:
            _, l1, ce, total = state.history[-1]
            log.info("step %d  l1 %.4f  ce %.4f  total %.4f", state.step, l1, ce, total)
        if progress is not None:
            progress(state)
        if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            state.elapsed_s += time.perf_counter() - t0
            t0 = time.perf_counter()
            save_checkpoint(out / "checkpoint", state, cfg, corpus)
    state.elapsed_s += time.perf_counter() - t0
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_loss_csv(out / "loss.csv", state.history)
        if state.vanilla_history:
            with open(out / "vanilla_loss.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(("step", "l1"))
                w.writerows((s, repr(v)) for s, v in state.vanilla_history)
        save_checkpoint(out / "checkpoint", state, cfg, corpus)
    return state


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, state: TrainState, cfg: TrainConfig, corpus: Optional[CorpusManifest] = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, part in state.model.parts().items():
        torch.save(part.state_dict(), path / f"{name}.pt")
    torch.save({k: o.state_dict() for k, o in state.optimizers.items()}, path / "optimizer.pt")
    manifest = {
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "step": state.step,
        "elapsed_s": round(state.elapsed_s, 3),
        "parts": sorted(state.model.parts()),
        "train_config": cfg.to_dict(),
        "corpus": str(corpus.root.resolve()) if corpus is not None and corpus.root is not None else None,
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def load_checkpoint(path) -> tuple[TrainState, TrainConfig, dict]:
    path = Path(path)
    if not (path / "manifest.json").exists() and (path / "checkpoint" / "manifest.json").exists():
        path = path / "checkpoint"
    if not (path / "manifest.json").exists():
        raise StateError(f"{path} is not a checkpoint directory (no manifest.json)")
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    cfg = TrainConfig.from_dict(manifest["train_config"])
    model = CiseModel(cfg.model)
    for name, part in model.parts().items():
        f = path / f"{name}.pt"
        if not f.exists():
            raise StateError(f"checkpoint {path} lacks parameter archive {f.name}")
        part.load_state_dict(torch.load(f, weights_only=True))
    optimizers = make_optimizers(model, cfg)
    if (path / "optimizer.pt").exists():
        for k, sd in torch.load(path / "optimizer.pt", weights_only=True).items():
            optimizers[k].load_state_dict(sd)
    state = TrainState(model, optimizers, step=int(manifest["step"]), seed=cfg.seed,
                       elapsed_s=float(manifest.get("elapsed_s", 0.0)))
    return state, cfg, manifest


# -- test-time forward ----------------------------------------------------------

TEST_MODES = ("predicted", "oracle", "inverted", "random", "injected", "vanilla")


def test_forward(model: CiseModel, mixed: Spectrogram, mode: str = "predicted",
                 truth: Optional[InterventionMask] = None, injected: Optional[InterventionMask] = None,
                 seed=0, predict_mode: str = "sample") -> tuple[Spectrogram, Optional[InterventionMask]]:
    """Enhance ``mixed`` switching EMs on a predicted or injected intervention.

    ``oracle``/``inverted`` need ``truth``; ``injected`` takes ``injected`` as-is;
    ``vanilla`` runs the single-EM baseline and returns no intervention.
    """
    if mode not in TEST_MODES:
        raise InputError(f"unknown test mode {mode!r}")
    model.eval()
    n_frames = mixed.n_frames
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dtype = _dtype(model)
    mag = torch.as_tensor(np.abs(mixed.bins), dtype=dtype)[None]
    with torch.no_grad():
        if mode == "vanilla":
            if model.vanilla is None:
                raise StateError("checkpoint has no single-EM baseline head")
            return _apply_gain(mixed, model.vanilla(mag)[0]), None
        if mode == "predicted":
            wav = torch.as_tensor(istft(mixed).samples, dtype=dtype)[None]
            probs = model.detector(wav, n_frames)[0]
            i_hat = predict_intervention(probs.double(), predict_mode, rng)
        elif mode == "random":
            i_hat = random_mask(n_frames, 0.5, rng)
        elif mode == "injected":
            if injected is None:
                raise InputError("mode 'injected' needs an injected mask")
            i_hat = injected
        else:
            if truth is None:
                raise InputError(f"mode {mode!r} needs the ground-truth mask")
            i_hat = truth if mode == "oracle" else corrupt_mask(truth, 0.0)
        if len(i_hat) != n_frames:
            raise InputError(f"intervention has {len(i_hat)} frames, spectrogram has {n_frames}")
        switch = torch.as_tensor(i_hat.labels.astype(np.int64))[None]
        gain = switch_masks(model, mag, switch)[0]
    return _apply_gain(mixed, gain), i_hat
