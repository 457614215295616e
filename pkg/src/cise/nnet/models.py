"""Enhancement modules, frame encoder and noise detector."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import Tensor, nn

from ..errors import InputError
from ..intervention import InterventionMask
from ..spectral import FrameParams, Waveform
from .conformer import Conformer, ConformerConfig

EMBED_DIM = 512


@dataclass
class ModelConfig:
    n_bins: int = 512
    em: ConformerConfig = field(default_factory=lambda: ConformerConfig(layers=2))
    detector: ConformerConfig = field(default_factory=lambda: ConformerConfig(layers=4))
    embed_dim: int = EMBED_DIM
    max_gain: float = 2.0
    frame_params: FrameParams = field(default_factory=FrameParams)
    vanilla: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frame_params"] = self.frame_params.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["em"] = ConformerConfig(**d["em"])
        d["detector"] = ConformerConfig(**d["detector"])
        d["frame_params"] = FrameParams(**d["frame_params"])
        return cls(**d)


class EnhancementModule(nn.Module):
    """Maps a magnitude spectrogram (B, T, F) to a nonnegative gain mask of the same shape."""

    def __init__(self, n_bins: int, cfg: ConformerConfig, max_gain: float = 2.0):
        super().__init__()
        self.max_gain = max_gain
        self.input_norm = nn.BatchNorm1d(n_bins)
        self.input_proj = nn.Linear(n_bins, cfg.model_dim)
        self.input_dropout = nn.Dropout(cfg.dropout)
        self.conformer = Conformer(cfg)
        self.head = nn.Linear(cfg.model_dim, n_bins)

    def forward(self, mag: Tensor, pad_mask: Optional[Tensor] = None) -> Tensor:
        # magnitudes span several decades; compress before normalising
        x = torch.log1p(mag)
        x = self.input_norm(x.transpose(1, 2)).transpose(1, 2)
        x = self.input_dropout(self.input_proj(x))
        x = self.conformer(x, pad_mask)
        return self.max_gain * torch.sigmoid(self.head(x))


class FrameEncoder(nn.Module):
    """Strided 1-D convolutions turning a waveform into one embedding per STFT frame.

    The stride product equals the STFT hop and the receptive field is centred
    inside each analysis window, so output frame ``t`` describes STFT frame ``t``.
    """

    layout = ((32, 10, 5), (64, 8, 4), (128, 4, 4), (EMBED_DIM, 4, 4))

    def __init__(self, frame_params: FrameParams, embed_dim: int = EMBED_DIM):
        super().__init__()
        layout = list(self.layout)
        layout[-1] = (embed_dim,) + layout[-1][1:]
        stride = math.prod(s for _, _, s in layout)
        if stride != frame_params.hop:
            raise InputError(f"encoder stride {stride} must equal hop {frame_params.hop}")
        self.frame_params = frame_params
        layers = []
        in_ch = 1
        rf, jump = 1, 1
        for i, (out_ch, k, s) in enumerate(layout):
            layers.append(nn.Conv1d(in_ch, out_ch, k, stride=s, bias=i > 0))
            if i == 0:
                layers.append(nn.GroupNorm(out_ch, out_ch))
            layers.append(nn.GELU())
            rf += (k - 1) * jump
            jump *= s
            in_ch = out_ch
        self.net = nn.Sequential(*layers)
        self.receptive_field = rf
        self.offset = max(0, (frame_params.win_length - rf) // 2)

    def forward(self, wav: Tensor, n_frames: int) -> Tensor:
        p = self.frame_params
        need = (n_frames - 1) * p.hop + p.win_length
        if wav.shape[-1] < need:
            wav = nn.functional.pad(wav, (0, need - wav.shape[-1]))
        x = wav[:, None, self.offset:need]
        h = self.net(x).transpose(1, 2)
        if h.shape[1] < n_frames:
            h = nn.functional.pad(h, (0, 0, 0, n_frames - h.shape[1]), mode="replicate")
        return h[:, :n_frames]


class NoiseDetector(nn.Module):
    """Frame encoder, Conformer stack, channel BatchNorm and a 2-way classifier."""

    def __init__(self, cfg: ConformerConfig, frame_params: FrameParams, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.frame_params = frame_params
        self.encoder = FrameEncoder(frame_params, embed_dim)
        self.input_proj = nn.Linear(embed_dim, cfg.model_dim)
        self.input_dropout = nn.Dropout(cfg.dropout)
        self.conformer = Conformer(cfg)
        self.norm = nn.BatchNorm1d(cfg.model_dim)
        self.head = nn.Linear(cfg.model_dim, 2)

    def logits(self, wav: Optional[Tensor] = None, n_frames: Optional[int] = None,
               embeddings: Optional[Tensor] = None, pad_mask: Optional[Tensor] = None) -> Tensor:
        if embeddings is None:
            if wav is None or n_frames is None:
                raise InputError("detector needs a waveform and frame count, or embeddings")
            embeddings = self.encoder(wav, n_frames)
        x = self.input_dropout(self.input_proj(embeddings))
        x = self.conformer(x, pad_mask)
        x = self.norm(x.transpose(1, 2)).transpose(1, 2)
        return self.head(x)

    def forward(self, wav: Tensor, n_frames: int, pad_mask: Optional[Tensor] = None) -> Tensor:
        return torch.softmax(self.logits(wav, n_frames, pad_mask=pad_mask), dim=-1)


class CiseModel(nn.Module):
    """Container for the two enhancement modules, the detector and an optional single-EM baseline."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.em0 = EnhancementModule(cfg.n_bins, cfg.em, cfg.max_gain)
        self.em1 = EnhancementModule(cfg.n_bins, cfg.em, cfg.max_gain)
        self.detector = NoiseDetector(cfg.detector, cfg.frame_params, cfg.embed_dim)
        self.vanilla = EnhancementModule(cfg.n_bins, cfg.em, cfg.max_gain) if cfg.vanilla else None

    def parts(self) -> dict[str, nn.Module]:
        out = {"em0": self.em0, "em1": self.em1, "detector": self.detector}
        if self.vanilla is not None:
            out["vanilla"] = self.vanilla
        return out


def parameter_report(model: nn.Module) -> dict[str, int]:
    """Trainable parameter counts per top-level child plus a total."""
    report = {name: sum(p.numel() for p in child.parameters()) for name, child in model.named_children()}
    report["total"] = sum(report.values())
    return report


def _as_batch(x, dtype=torch.float32) -> tuple[Tensor, bool]:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, Tensor) else x, dtype=dtype)
    if t.ndim == 2:
        return t[None], True
    return t, False


def em_forward(em: EnhancementModule, mag) -> Tensor:
    """Mask for a magnitude spectrogram of shape (T, F) or (B, T, F)."""
    x, squeeze = _as_batch(mag, next(em.parameters()).dtype)
    if torch.isnan(x).any():
        raise InputError("magnitude input contains NaN")
    if (x < 0).any():
        raise InputError("magnitude input must be nonnegative")
    out = em(x)
    return out[0] if squeeze else out


def detect(d: NoiseDetector, w: Waveform) -> Tensor:
    """Per-frame (p(i=0), p(i=1)) for a single waveform, shape (T, 2)."""
    n_frames = d.frame_params.n_frames(len(w))
    wav = torch.as_tensor(w.samples, dtype=next(d.parameters()).dtype)[None]
    return d(wav, n_frames)[0]


def detect_embeddings(d: NoiseDetector, embeddings) -> Tensor:
    """Detector probabilities from precomputed (T, 512) frame embeddings."""
    e, squeeze = _as_batch(embeddings, next(d.parameters()).dtype)
    if e.shape[-1] != d.input_proj.in_features:
        raise InputError(f"embeddings have dim {e.shape[-1]}, detector expects {d.input_proj.in_features}")
    probs = torch.softmax(d.logits(embeddings=e), dim=-1)
    return probs[0] if squeeze else probs


def predict_intervention(probs, mode: str = "sample", seed=0) -> InterventionMask:
    p = probs.detach().cpu().numpy() if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2:
        raise InputError(f"expected (T, 2) probabilities, got {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-4):
        raise InputError("probability rows must be nonnegative and sum to 1")
    if mode == "argmax":
        labels = (p[:, 1] > p[:, 0]).astype(np.int8)
    elif mode == "sample":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        labels = (rng.random(p.shape[0]) < p[:, 1]).astype(np.int8)
    else:
        raise InputError(f"unknown prediction mode {mode!r}")
    return InterventionMask(labels, "predicted")


def clone_model(model: CiseModel) -> CiseModel:
    return copy.deepcopy(model)
