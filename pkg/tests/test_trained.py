"""Behaviour of the default-budget model beyond the acceptance criteria."""
import csv
import json
import math

import torch

from cise.cli import main
from cise.data import CorpusManifest
from cise.evaluation import test_units as mixed_test_units
from cise.nnet.models import detect
from cise.training import load_checkpoint


def test_detector_separates_frames_within_utterance(trained_run):
    # the detector is trained on mixtures and judges frames relative to their neighbours;
    # an all-clean utterance is outside that distribution and gets no such guarantee
    state, cfg, manifest = load_checkpoint(trained_run / "run")
    corpus = CorpusManifest.read(manifest["corpus"])
    model = state.model
    model.eval()
    with torch.no_grad():
        for unit in mixed_test_units(corpus, cfg.frame_params, seed=0)[:10]:
            p = detect(model.detector, unit.mixed_wave)[:, 1].numpy()
            noisy = unit.mask.labels.astype(bool)
            assert p[noisy].mean() > p[~noisy].mean() + 0.1


def test_ate_report_recomputes_from_scores(trained_run, tmp_path):
    out = tmp_path / "ate"
    assert main(["ate", "--checkpoint", str(trained_run / "run"), "--metric", "stoi", "--permutations", "50",
                 "--out", str(out)]) == 0
    report = json.loads((out / "ate.json").read_text())
    with open(out / "scores.csv", newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["metric"] == "stoi"]
    groups = {g: [float(r["value"]) for r in rows if r["group"] == g] for g in ("treatment", "control")}
    recomputed = math.fsum(groups["treatment"]) / len(groups["treatment"]) - \
        math.fsum(groups["control"]) / len(groups["control"])
    stoi_report = next(r for r in report["reports"] if r["metric"] == "stoi")
    assert abs(stoi_report["ate"] - recomputed) < 1e-12
    # enhancing noisy speech still leaves it less intelligible than enhanced clean speech
    assert stoi_report["ate"] < 0
