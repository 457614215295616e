import numpy as np
import pytest
import torch

from cise.data import synth_corpus
from cise.nnet.conformer import ConformerConfig
from cise.nnet.models import ModelConfig
from cise.spectral import Waveform
from cise.training import TrainConfig

SR = 16000


def tiny_model_config(dim: int = 16, dropout: float = 0.0) -> ModelConfig:
    return ModelConfig(
        em=ConformerConfig(model_dim=dim, heads=2, conv_kernel=5, dropout=dropout, layers=1),
        detector=ConformerConfig(model_dim=dim, heads=2, conv_kernel=5, dropout=dropout, layers=1),
    )


def tiny_train_config(**overrides) -> TrainConfig:
    kw = dict(batch_size=2, steps=4, seed=3, checkpoint_every=0, model=tiny_model_config())
    kw.update(overrides)
    return TrainConfig(**kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def noise_wave(rng):
    return Waveform(rng.standard_normal(SR), SR)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return synth_corpus(n_utts=8, duration_s=1.0, sample_rate=SR, seed=11, out_dir=root, n_test=3)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# -- shared desk-scale run and acceptance reporting -----------------------------

DEFAULT_SYNTH = ["n=200", "dur=2", "sr=16000", "seed=7"]
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def _acceptance_root(request):
    import os
    from pathlib import Path

    return Path(os.environ.get("CISE_ACCEPTANCE_DIR") or request.config.cache.mkdir("cise-acceptance"))


@pytest.fixture(scope="session")
def default_corpus(request):
    """The default synthetic corpus, curated once into the acceptance cache directory."""
    from cise.cli import main

    corpus = _acceptance_root(request) / "corpus"
    if not (corpus / "manifest.jsonl").exists():
        assert main(["curate", "--synth", *DEFAULT_SYNTH, "--out", str(corpus)]) == 0
    return corpus


@pytest.fixture(scope="session")
def trained_run(request, default_corpus):
    """Train with the default budget on the default corpus, once.

    The run lives in the pytest cache (or ``$CISE_ACCEPTANCE_DIR``) and is reused
    when a finished checkpoint with the same training config is already there.
    """
    import json

    from cise.cli import main
    from cise.training import TrainConfig

    root = _acceptance_root(request)
    run = root / "run"
    manifest = run / "checkpoint" / "manifest.json"
    cfg = TrainConfig()
    done = False
    if manifest.exists():
        meta = json.loads(manifest.read_text())
        done = meta["config_hash"] == cfg.digest() and meta["step"] == cfg.steps and (run / "loss.csv").exists()
    if not done:
        assert main(["train", "--corpus", str(default_corpus), "--out", str(run)]) == 0
    return root


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[number] = (passed, detail)
    print(f"ACCEPTANCE {number:2d} {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
