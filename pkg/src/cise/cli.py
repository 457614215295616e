"""``cise`` command line: curate, train, eval, sweep, ate, report, bench."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import statistics
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from .errors import CiseError, ConfigurationError, InputError, ReportError

log = logging.getLogger("cise")

EVAL_ORDER = ("oracle", "predicted", "random", "vanilla", "inverted")
MEAN_ROW = "mean"
MISSING = "-"


# -- small helpers --------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _read_csv(path: Path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or []), list(reader)


def _parse_kv(tokens: Sequence[str]) -> dict:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ConfigurationError(f"expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _parse_floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(",", " ").split()]


def _parse_ints(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).replace(",", " ").split()]


def _registry(plugins):
    from .metrics import PluginRegistry

    if plugins:
        return PluginRegistry.from_file(plugins)
    return PluginRegistry.from_env()


def _file_cfg(args) -> Optional[dict]:
    return cfgmod.load_config(args.config) if getattr(args, "config", None) else None


def _settings(args, section: str, defaults: dict) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "config", "command")}
    values = cfgmod.resolve(section, defaults, _file_cfg(args), flags)
    if not values.get("out"):
        raise ConfigurationError(f"{section}: an output directory is required (--out)")
    cfgmod.write_resolved(values["out"], section, values)
    return values


# -- curate ---------------------------------------------------------------------

CURATE_DEFAULTS = {"out": None, "seed": 7, "plugins": None, "synth": None, "clean": None, "noisy": None,
                   "clean_test": None, "noisy_test": None, "resample": None, "p1": 0.5}
SYNTH_DEFAULTS = {"n": 200, "dur": 2.0, "sr": 16000, "seed": None, "test_fraction": 0.2}


def cmd_curate(args) -> int:
    from .data import CorpusManifest, MANIFEST_NAME, ingest, synth_corpus
    from .evaluation import MASK_DIR, curation_mask
    from .intervention import save_mask
    from .spectral import FrameParams

    s = _settings(args, "curate", CURATE_DEFAULTS)
    out = Path(s["out"])
    if s["synth"] is not None:
        synth = dict(SYNTH_DEFAULTS)
        given = s["synth"] if isinstance(s["synth"], dict) else _parse_kv(s["synth"])
        unknown = set(given) - set(synth)
        if unknown:
            raise ConfigurationError(f"unknown --synth keys {sorted(unknown)}")
        synth.update(given)
        seed = int(synth["seed"]) if synth["seed"] is not None else int(s["seed"])
        corpus = synth_corpus(int(synth["n"]), float(synth["dur"]), int(synth["sr"]), seed, out,
                              test_fraction=float(synth["test_fraction"]))
    elif s["clean"] and s["noisy"]:
        resample_to = int(s["resample"]) if s["resample"] else None
        parts = [ingest(s["clean"], s["noisy"], out, "train", resample_to)]
        if s["clean_test"] and s["noisy_test"]:
            parts.append(ingest(s["clean_test"], s["noisy_test"], out, "test", resample_to))
        entries = [e for p in parts for e in p.entries]
        corpus = CorpusManifest(entries, out)
        corpus.save(out / MANIFEST_NAME)
    else:
        raise ConfigurationError("curate needs --synth or both --clean and --noisy")

    fp = FrameParams()
    (out / MASK_DIR).mkdir(parents=True, exist_ok=True)
    n_masks = 0
    for entry in corpus.split("test"):
        n = entry.num_samples if entry.num_samples is not None else len(corpus.load(entry).clean)
        save_mask(out / MASK_DIR / f"{entry.utt_id}.mask",
                  curation_mask(int(s["seed"]), entry.utt_id, fp.n_frames(n), float(s["p1"])))
        n_masks += 1
    print(f"curated {len(corpus)} utterances ({len(corpus.split('train'))} train, "
          f"{len(corpus.split('test'))} test, {n_masks} test masks) -> {out}")
    return 0


# -- train ----------------------------------------------------------------------

def _train_defaults() -> dict:
    from .training import TrainConfig

    d = TrainConfig().to_dict()
    d.update({"out": None, "plugins": None, "corpus": None})
    return d


def cmd_train(args) -> int:
    from .data import CorpusManifest
    from .training import TrainConfig, smoothed, train

    s = _settings(args, "train", _train_defaults())
    if not s["corpus"]:
        raise ConfigurationError("train needs --corpus (or a 'corpus' key in the config)")
    body = {k: v for k, v in s.items() if k not in ("out", "plugins", "corpus")}
    cfg = TrainConfig.from_dict(body)
    corpus = CorpusManifest.read(s["corpus"])
    state = train(cfg, corpus, s["out"])
    totals = [h[3] for h in state.history]
    if totals:
        sm = smoothed(totals)
        print(f"trained {state.step} steps in {state.elapsed_s:.1f}s; smoothed total loss "
              f"{sm[min(99, len(sm) - 1)]:.4f} (step 100) -> {sm[-1]:.4f} (final)")
    return 0


# -- eval -----------------------------------------------------------------------

EVAL_DEFAULTS = {"out": None, "seed": 0, "plugins": None, "checkpoint": None, "corpus": None,
                 "mode": list(EVAL_ORDER)}


def _load_run(s):
    from .data import CorpusManifest
    from .training import load_checkpoint

    if not s.get("checkpoint"):
        raise ConfigurationError("--checkpoint is required")
    state, tcfg, manifest = load_checkpoint(s["checkpoint"])
    corpus_path = s.get("corpus") or manifest.get("corpus")
    if not corpus_path:
        raise ConfigurationError("--corpus is required (checkpoint does not record one)")
    return state, tcfg, CorpusManifest.read(corpus_path)


def eval_rows(state, corpus, modes, seed, registry, fp):
    from .evaluation import frame_accuracy, mean_scores, metric_names, mode_chooser, score_units, test_units

    units = test_units(corpus, fp, seed)
    names = metric_names(registry)
    rows = []
    for mode in modes:
        scores = score_units(state.model, units, mode_chooser(mode, seed), registry, group=mode)
        for s in scores:
            rows.append([mode, s.utt_id, s.da] + [s.values[n] for n in names])
        means = mean_scores(scores, names)
        rows.append([mode, MEAN_ROW, frame_accuracy(units, scores)] + [means[n] for n in names])
    return ["mode", "utterance_id", "da"] + names, rows


def cmd_eval(args) -> int:
    s = _settings(args, "eval", EVAL_DEFAULTS)
    modes = s["mode"] if isinstance(s["mode"], list) else [s["mode"]]
    state, tcfg, corpus = _load_run(s)
    header, rows = eval_rows(state, corpus, modes, int(s["seed"]), _registry(s["plugins"]), tcfg.frame_params)
    out = Path(s["out"])
    _write_csv(out / "eval.csv", header, rows)
    for row in rows:
        if row[1] == MEAN_ROW:
            print("  ".join(f"{h}={_fmt(v) or MISSING}" for h, v in zip(header, row) if h != "utterance_id"))
    return 0


# -- sweep ----------------------------------------------------------------------

SWEEP_DEFAULTS = {"out": None, "seed": 0, "plugins": None, "checkpoint": None, "corpus": None,
                  "grid": [0.0, 0.25, 0.5, 0.75, 1.0]}


def _plot_sweep(out: Path, p: list[float], series: dict[str, list[float]], ates: dict[str, list[float]],
                label: str = "") -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for name, ys in series.items():
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        for ax, values, title in ((axes[0], ys, f"mean {name}"), (axes[1], ates.get(name), f"ATE {name}")):
            if values is None:
                ax.set_visible(False)
                continue
            ax.plot(p, values, marker="o", label=label or None)
            for x, y in zip(p, values):
                if x == 1.0:
                    ax.annotate("oracle", (x, y), textcoords="offset points", xytext=(-30, 6))
                elif x == 0.0:
                    ax.annotate("inverted", (x, y), textcoords="offset points", xytext=(4, 6))
            ax.set_xlabel("detection accuracy p")
            ax.set_title(title)
            ax.grid(alpha=0.3)
        fig.tight_layout()
        path = out / f"sweep_{name}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def cmd_sweep(args) -> int:
    from .causal import accuracy_sweep
    from .evaluation import metric_names

    s = _settings(args, "sweep", SWEEP_DEFAULTS)
    state, tcfg, corpus = _load_run(s)
    registry = _registry(s["plugins"])
    result = accuracy_sweep(state, corpus, _parse_floats(s["grid"]), int(s["seed"]), registry,
                            tcfg.frame_params, str(s["checkpoint"]))
    names = metric_names(registry)
    out = Path(s["out"])
    header = ["p", "da"] + names + [f"ate_{n}" for n in names]
    rows = [[r.p, r.da] + [r.means[n] for n in names] + [r.ates[n] for n in names] for r in result.rows]
    _write_csv(out / "sweep.csv", header, rows)
    _plot_sweep(out, result.grid, {n: [r.means[n] for r in result.rows] for n in names},
                {n: [r.ates[n] for r in result.rows] for n in names})
    for row in rows:
        print("  ".join(f"{h}={_fmt(v)}" for h, v in zip(header, row)))
    return 0


# -- ate ------------------------------------------------------------------------

ATE_DEFAULTS = {"out": None, "seed": 0, "plugins": None, "checkpoint": None, "corpus": None, "metric": None,
                "enhancer": "model", "mode": "predicted", "p": None, "permutations": 1000}


def cmd_ate(args) -> int:
    from .causal import ModelEnhancer, ate_all_metrics, ate_units, identity_enhancer, oracle_enhancer, placebo_test
    from .data import CorpusManifest
    from .spectral import FrameParams

    s = _settings(args, "ate", ATE_DEFAULTS)
    registry = _registry(s["plugins"])
    seed = int(s["seed"])
    if s["enhancer"] == "model":
        state, tcfg, corpus = _load_run(s)
        fp = tcfg.frame_params
        p = float(s["p"]) if s["p"] is not None else None
        enhancer = ModelEnhancer(state, fp, accuracy=p, mode=s["mode"], seed=seed)
    elif s["enhancer"] in ("identity", "oracle"):
        if not s["corpus"]:
            raise ConfigurationError("--corpus is required")
        corpus, fp = CorpusManifest.read(s["corpus"]), FrameParams()
        enhancer = identity_enhancer if s["enhancer"] == "identity" else oracle_enhancer
    else:
        raise ConfigurationError(f"unknown enhancer {s['enhancer']!r}")
    reports = ate_all_metrics(ate_units(corpus, fp, seed), enhancer, registry)
    wanted = s["metric"] if isinstance(s["metric"], list) else ([s["metric"]] if s["metric"] else list(reports))
    missing = [m for m in wanted if m not in reports]
    if missing:
        raise ConfigurationError(f"metrics not available: {missing}; registered: {sorted(reports)}")
    out = Path(s["out"])
    summary, score_rows = [], []
    for name in wanted:
        rep = reports[name]
        t = [x.value for x in rep.scores if x.group == "treatment" and not math.isnan(x.value)]
        c = [x.value for x in rep.scores if x.group == "control" and not math.isnan(x.value)]
        placebo = placebo_test(t, c, int(s["permutations"]), seed)
        summary.append({**rep.to_dict(), "placebo_ate": placebo.placebo_ate,
                        "null_quantile_95": placebo.null_quantile, "p_value": placebo.p_value,
                        "placebo_passed": placebo.passed})
        score_rows += [[x.utterance_id, x.group, x.name, x.value] for x in rep.scores]
        print(f"ATE_{name} = {rep.ate:+.6f}  (treatment {rep.treatment_mean:.6f} n={rep.n_treatment}, "
              f"control {rep.control_mean:.6f} n={rep.n_control}, permutation p={placebo.p_value:.3f})")
    with open(out / "ate.json", "w") as fh:
        json.dump({"enhancer": s["enhancer"], "mode": s["mode"], "p": s["p"], "seed": seed, "reports": summary},
                  fh, indent=2, sort_keys=True)
    _write_csv(out / "scores.csv", ["utterance_id", "group", "metric", "value"], score_rows)
    return 0


# -- report ---------------------------------------------------------------------

REPORT_DEFAULTS = {"out": None, "seed": 0, "plugins": None, "runs": []}


def _mark(row: dict, columns: list[str]) -> list[str]:
    return [row.get(c) if row.get(c) not in (None, "") else MISSING for c in columns]


def build_report(run_dirs: Sequence[str]) -> tuple[Optional[tuple], Optional[tuple]]:
    """Merge ``eval.csv`` mean rows and ``sweep.csv`` rows of several runs into union tables."""
    eval_rows, sweep_rows = [], []
    eval_cols, sweep_cols = [], []
    for run in run_dirs:
        run_path = Path(run)
        found = False
        if (run_path / "eval.csv").exists():
            found = True
            header, rows = _read_csv(run_path / "eval.csv")
            lacking = [c for c in ("mode", "utterance_id", "da") if c not in header]
            if lacking:
                raise ReportError(f"run {run}: eval.csv lacks columns {lacking}")
            for c in header:
                if c not in eval_cols and c != "utterance_id":
                    eval_cols.append(c)
            eval_rows += [{**r, "run": run} for r in rows if r["utterance_id"] == MEAN_ROW]
        if (run_path / "sweep.csv").exists():
            found = True
            header, rows = _read_csv(run_path / "sweep.csv")
            lacking = [c for c in ("p", "da") if c not in header]
            if lacking:
                raise ReportError(f"run {run}: sweep.csv lacks columns {lacking}")
            for c in header:
                if c not in sweep_cols:
                    sweep_cols.append(c)
            sweep_rows += [{**r, "run": run} for r in rows]
        if not found:
            raise ReportError(f"run {run}: neither eval.csv nor sweep.csv present")
    order = {m: k for k, m in enumerate(EVAL_ORDER)}
    eval_table = sweep_table = None
    if eval_rows:
        eval_rows.sort(key=lambda r: (order.get(r["mode"], len(order)), r["run"]))
        cols = ["run"] + eval_cols
        eval_table = (cols, [_mark(r, cols) for r in eval_rows])
    if sweep_rows:
        sweep_rows.sort(key=lambda r: (float(r["p"]), r["run"]))
        cols = ["run"] + sweep_cols
        sweep_table = (cols, [_mark(r, cols) for r in sweep_rows])
    return eval_table, sweep_table


def cmd_report(args) -> int:
    s = _settings(args, "report", REPORT_DEFAULTS)
    runs = s["runs"]
    if not runs:
        raise ConfigurationError("report needs at least one run directory")
    out = Path(s["out"])
    eval_table, sweep_table = build_report(runs)
    if eval_table:
        _write_csv(out / "report_eval.csv", *eval_table)
    if sweep_table:
        cols, rows = sweep_table
        _write_csv(out / "report_sweep.csv", cols, rows)
        metric_cols = [c for c in cols if c not in ("run", "p", "da") and not c.startswith("ate_")]
        for run in dict.fromkeys(r[0] for r in rows):
            sel = [r for r in rows if r[0] == run]
            p = [float(r[cols.index("p")]) for r in sel]

            def col(name):
                if name not in cols:
                    return None
                vals = [r[cols.index(name)] for r in sel]
                return None if any(v == MISSING for v in vals) else [float(v) for v in vals]

            series = {m: col(m) for m in metric_cols if col(m) is not None}
            ates = {m: col(f"ate_{m}") for m in series if col(f"ate_{m}") is not None}
            sub = out / Path(run).name if len(set(r[0] for r in rows)) > 1 else out
            sub.mkdir(parents=True, exist_ok=True)
            _plot_sweep(sub, p, series, ates, label=Path(run).name)
    for table in (eval_table, sweep_table):
        if table:
            cols, rows = table
            print(",".join(cols))
            for r in rows:
                print(",".join(r))
    return 0


# -- bench ----------------------------------------------------------------------

BENCH_DEFAULTS = {"out": None, "seed": 0, "plugins": None, "checkpoint": None, "seconds": 1.0,
                  "batch_sizes": [1, 16], "repeats": 5}


def bench_model(model, seconds: float, batch_sizes: Sequence[int], repeats: int = 5, seed: int = 0):
    """Median wall-clock per audio second for forward and forward+backward passes of the dual-EM model."""
    import torch

    from .intervention import rng_for
    from .training import switch_masks

    fp = model.cfg.frame_params
    sr = 16000
    n = max(fp.win_length, int(round(seconds * sr)))
    n_frames = fp.n_frames(n)
    rng = rng_for(seed, "bench")
    model.eval()
    rows = []
    for bs in batch_sizes:
        wav = torch.as_tensor(rng.standard_normal((bs, n)) * 0.05, dtype=torch.float32)
        mag = torch.as_tensor(np.abs(rng.standard_normal((bs, n_frames, fp.n_bins))), dtype=torch.float32)

        def run(backward: bool):
            model.zero_grad(set_to_none=True)
            with torch.set_grad_enabled(backward):
                probs = model.detector(wav, n_frames)
                switch = probs.argmax(-1)
                gain = switch_masks(model, mag, switch)
                if backward:
                    (gain.sum() + probs.sum()).backward()

        times = {}
        for backward in (False, True):
            run(backward)
            samples = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                run(backward)
                samples.append(time.perf_counter() - t0)
            times[backward] = statistics.median(samples) / (bs * n / sr)
        rows.append((bs, n / sr, times[False], times[True]))
    return rows


def cmd_bench(args) -> int:
    from .training import load_checkpoint

    s = _settings(args, "bench", BENCH_DEFAULTS)
    if not s["checkpoint"]:
        raise ConfigurationError("--checkpoint is required")
    state, _, _ = load_checkpoint(s["checkpoint"])
    rows = bench_model(state.model, float(s["seconds"]), _parse_ints(s["batch_sizes"]), int(s["repeats"]),
                       int(s["seed"]))
    header = ["batch_size", "audio_seconds", "forward_s_per_audio_s", "forward_backward_s_per_audio_s"]
    _write_csv(Path(s["out"]) / "bench.csv", header, rows)
    for row in rows:
        print("  ".join(f"{h}={_fmt(v)}" for h, v in zip(header, row)))
    return 0


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cise", description="Causal-intervention speech enhancement toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, func):
        p.add_argument("--config", help="YAML run config; flags override its values")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="root seed for all random substreams")
        p.add_argument("--plugins", help="external evaluator registry (default: $CISE_PLUGINS)")
        p.set_defaults(func=func)

    p = sub.add_parser("curate", help="build a corpus (synthetic or from wav directories)")
    common(p, cmd_curate)
    p.add_argument("--synth", nargs="*", metavar="KEY=VALUE", help="synthetic corpus: n, dur, sr, seed")
    p.add_argument("--clean")
    p.add_argument("--noisy")
    p.add_argument("--clean-test", dest="clean_test")
    p.add_argument("--noisy-test", dest="noisy_test")
    p.add_argument("--resample", type=int, help="resample all audio to this rate")
    p.add_argument("--p1", type=float, help="probability of a noisy frame in stored test masks")

    p = sub.add_parser("train", help="train the dual-EM model and detector")
    common(p, cmd_train)
    p.add_argument("--corpus")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--mask-resampling", dest="mask_resampling", choices=("fresh", "fixed"))
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)

    p = sub.add_parser("eval", help="score the test split under one or more intervention modes")
    common(p, cmd_eval)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--mode", action="append", choices=EVAL_ORDER, help="repeatable; default: all modes")

    p = sub.add_parser("sweep", help="controlled detection-accuracy sweep")
    common(p, cmd_sweep)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--grid", help="comma-separated accuracies in [0, 1]")

    p = sub.add_parser("ate", help="average treatment effect per metric")
    common(p, cmd_ate)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--metric", action="append")
    p.add_argument("--enhancer", choices=("model", "identity", "oracle"))
    p.add_argument("--mode", choices=("predicted", "random", "vanilla"))
    p.add_argument("--p", type=float, help="inject ground truth corrupted to this accuracy")
    p.add_argument("--permutations", type=int)

    p = sub.add_parser("report", help="merge eval/sweep outputs of several runs")
    common(p, cmd_report)
    p.add_argument("runs", nargs="*")

    p = sub.add_parser("bench", help="time forward and forward+backward passes")
    common(p, cmd_bench)
    p.add_argument("--checkpoint")
    p.add_argument("--seconds", type=float)
    p.add_argument("--batch-sizes", dest="batch_sizes")
    p.add_argument("--repeats", type=int)
    return parser


def _error_summary(args, exc: BaseException) -> None:
    out = getattr(args, "out", None)
    if out is None and getattr(args, "config", None):
        try:
            out = cfgmod.load_config(args.config).get("out")
        except Exception:
            out = None
    summary = {"command": getattr(args, "command", None), "error": type(exc).__name__, "message": str(exc)}
    if out:
        try:
            Path(out).mkdir(parents=True, exist_ok=True)
            with open(Path(out) / "error.json", "w") as fh:
                json.dump(summary, fh, indent=2, sort_keys=True)
        except OSError:
            pass
    print(f"cise {summary['command']}: {summary['error']}: {summary['message']}", file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CiseError, OSError) as exc:
        _error_summary(args, exc)
        return 2 if isinstance(exc, (ConfigurationError, InputError)) else 1
    except Exception as exc:  # unexpected failure: still leave a machine-readable summary
        log.exception("unexpected failure")
        _error_summary(args, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
