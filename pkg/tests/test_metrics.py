import sys
import textwrap

import numpy as np
import pytest
from pystoi import stoi as reference_stoi
from scipy.signal import resample_poly

from cise.data import synth_pair
from cise.errors import ConfigurationError, EvaluatorError, InputError, ProtocolError, UndefinedMetricError
from cise.metrics import (PLUGIN_ENV, MetricScore, PluginRegistry, external_eval, external_eval_batch, ssnr, stoi,
                          third_octave_bands)
from cise.spectral import Waveform, write_wav

SR = 16000


def speechlike(seed=0, dur=2.0, sr=SR):
    return synth_pair(seed, f"m{seed}", "test", dur, sr)


def with_noise(clean: Waveform, snr_db: float, seed=0) -> Waveform:
    noise = np.random.default_rng(seed).standard_normal(len(clean))
    noise *= np.sqrt(np.sum(clean.samples**2) / (np.sum(noise**2) * 10 ** (snr_db / 10)))
    return Waveform(clean.samples + noise, clean.sample_rate)


def test_ssnr_identity_and_silence():
    w = speechlike().clean
    assert ssnr(w, w) == 35.0
    assert ssnr(w, Waveform(np.zeros(len(w)), SR)) == 0.0
    with pytest.raises(UndefinedMetricError):
        ssnr(Waveform(np.zeros(SR), SR), Waveform(np.ones(SR), SR))
    with pytest.raises(InputError):
        ssnr(w, Waveform(w.samples[:-1], SR))


def test_ssnr_constructed_snr():
    t = np.arange(2 * SR) / SR
    ref = Waveform(np.sin(2 * np.pi * 500 * t), SR)
    assert abs(ssnr(ref, with_noise(ref, 10.0, 1)) - 10.0) < 0.5


def test_ssnr_scale_sensitivity():
    w = speechlike(1).clean
    vals = {a: ssnr(w, Waveform(a * w.samples, SR)) for a in (0.5, 0.9, 1.1, 2.0)}
    assert all(np.isfinite(v) for v in vals.values())
    assert vals[0.5] < vals[0.9] and vals[2.0] < vals[1.1]


def test_stoi_identity():
    w = speechlike(2).clean
    assert abs(stoi(w, w) - 1.0) < 1e-6


def test_stoi_matches_reference_implementation():
    pair = speechlike(3, sr=10000)
    for est in (pair.noisy, with_noise(pair.clean, 0.0, 2), with_noise(pair.clean, -5.0, 3)):
        ours = stoi(pair.clean, est)
        theirs = reference_stoi(pair.clean.samples, est.samples, 10000)
        assert abs(ours - theirs) < 1e-9


def test_stoi_resampled_input_matches_reference():
    # the reference implementation resamples with an Octave-style filter and ours with a
    # Kaiser polyphase filter; feeding both the same 10 kHz signal isolates everything else
    pair = speechlike(3)
    x = resample_poly(pair.clean.samples, 5, 8)
    for est in (pair.noisy, with_noise(pair.clean, 0.0, 2)):
        y = resample_poly(est.samples, 5, 8)
        ours = stoi(pair.clean, est)
        assert abs(ours - reference_stoi(x, y, 10000)) < 1e-9
        assert abs(ours - reference_stoi(pair.clean.samples, est.samples, SR)) < 0.02


def test_stoi_polarity_inversion():
    # the measure compares short-time magnitude envelopes, so a sign flip is invisible to it
    pair = speechlike(4, sr=10000)
    neg = Waveform(-pair.clean.samples, 10000)
    assert abs(stoi(pair.clean, neg) - reference_stoi(pair.clean.samples, neg.samples, 10000)) < 1e-9
    assert stoi(pair.clean, neg) > 0.99


def test_stoi_monotone_in_snr():
    clean = speechlike(5).clean
    scores = [stoi(clean, with_noise(clean, snr, 6)) for snr in (-5, 0, 5, 10)]
    assert all(a < b for a, b in zip(scores, scores[1:]))
    assert 0.0 < scores[0] and scores[-1] < 1.0


def test_stoi_too_short():
    w = Waveform(np.ones(3000), SR)
    with pytest.raises(InputError):
        stoi(w, w)


def test_third_octave_band_layout():
    obm = third_octave_bands()
    assert obm.shape == (15, 257)
    assert np.all(obm.sum(axis=0) <= 1)


def test_metrics_are_pure():
    pair = speechlike(6)
    assert stoi(pair.clean, pair.noisy) == stoi(pair.clean, pair.noisy)
    assert ssnr(pair.clean, pair.noisy) == ssnr(pair.clean, pair.noisy)


@pytest.fixture
def wav_pair(tmp_path):
    pair = speechlike(7, dur=0.5)
    ref, est = tmp_path / "ref.wav", tmp_path / "est.wav"
    write_wav(ref, pair.clean)
    write_wav(est, pair.noisy)
    return ref, est


def stub(tmp_path, body, name="stub.py"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(body))
    return f"{sys.executable} {path} {{ref}} {{est}}"


def test_plugin_stub_roundtrip(tmp_path, wav_pair):
    reg = PluginRegistry()
    reg.register("pesq", stub(tmp_path, 'print("PESQ: 2.50")'))
    score = external_eval("pesq", *wav_pair, reg, utterance_id="u1")
    assert score == MetricScore("pesq", 2.50, "u1", "mixed")


def test_plugin_receives_paths(tmp_path, wav_pair):
    reg = PluginRegistry({"len": {"command": stub(tmp_path, """
        import sys
        from scipy.io import wavfile
        print(len(wavfile.read(sys.argv[1])[1]))
    """)}})
    assert external_eval("len", *wav_pair, reg).value == 8000


def test_plugin_error_paths(tmp_path, wav_pair):
    reg = PluginRegistry()
    with pytest.raises(ConfigurationError):
        external_eval("pesq", *wav_pair, reg)
    reg.register("missing", "/nonexistent/evaluator {ref} {est}")
    with pytest.raises(ConfigurationError):
        external_eval("missing", *wav_pair, reg)
    reg.register("garbage", stub(tmp_path, 'print("no score here")', "g.py"))
    with pytest.raises(ProtocolError):
        external_eval("garbage", *wav_pair, reg)
    reg.register("crash", stub(tmp_path, 'import sys; sys.stderr.write("boom"); sys.exit(3)', "c.py"))
    with pytest.raises(EvaluatorError) as err:
        external_eval("crash", *wav_pair, reg)
    assert err.value.returncode == 3 and "boom" in err.value.stderr
    reg.register("slow", stub(tmp_path, 'import time; time.sleep(5)', "s.py"), timeout=0.5)
    with pytest.raises(EvaluatorError, match="timed out"):
        external_eval("slow", *wav_pair, reg)


def test_plugin_batch_marks_failures_missing(tmp_path, wav_pair):
    reg = PluginRegistry()
    reg.register("garbage", stub(tmp_path, 'print("nothing")'))
    reg.register("ok", stub(tmp_path, 'print(1.25)', "ok.py"))
    jobs = [("a", "mixed", *map(str, wav_pair)), ("b", "mixed", *map(str, wav_pair))]
    assert all(np.isnan(s.value) for s in external_eval_batch("garbage", jobs, reg))
    assert [s.value for s in external_eval_batch("ok", jobs, reg)] == [1.25, 1.25]


def test_registry_from_env(tmp_path, monkeypatch):
    path = tmp_path / "plugins.yaml"
    path.write_text("plugins:\n  pesq:\n    command: pesq-eval {ref} {est}\n")
    monkeypatch.setenv(PLUGIN_ENV, str(path))
    assert PluginRegistry.from_env().names() == ["pesq"]
    monkeypatch.setenv(PLUGIN_ENV, str(tmp_path / "absent.yaml"))
    with pytest.raises(ConfigurationError):
        PluginRegistry.from_env()
