"""Acceptance criteria. Each test prints one PASS/FAIL line before asserting.

The lines bypass output capture, so they appear in a plain ``pytest -v`` run.
The two benchmark criteria together take a few minutes.
"""
import json
import time

import numpy as np
import pytest

from completion_moment import benchmark, verify
from completion_moment.cli import main
from completion_moment.evaluation import relative_distance, sequence_accuracy
from completion_moment.features import FrameClassifier
from completion_moment.inference import LEARNT, UNIFORM, detect_completion_weak, detect_completion_weak_oracle, supervised_estimate
from completion_moment.io import (
    decode_classifier, encode_classifier, load_model, read_features, read_manifest, read_raw, save_model,
    write_features, write_manifest, write_raw,
)
from completion_moment.model import SUPERVISED, WEAK, LOG, ModelParams

SEEDS = (0, 1, 2)
BENCH_BUDGET = 600.0


def _report(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}", flush=True)
    assert ok, detail


# --- 1. gradient verification ----------------------------------------------

def test_criterion_1_gradient_verification(capsys):
    start = time.perf_counter()
    reports = verify.gradcheck(seed=0, count=20, tol=1e-4, cases=verify.MODEL_CASES)
    seconds = time.perf_counter() - start
    worst = max(r.max_error for r in reports)
    labels = {r.label.split(" ")[0] for r in reports}
    ok = (len(reports) == 60 and all(r.passed for r in reports) and worst < 1e-4 and seconds < 60
          and labels == set(verify.MODEL_CASES))
    _report(capsys, 1, "gradient check", ok,
            f"{len(reports)} instances over {sorted(labels)}, worst relative error {worst:.2e}, {seconds:.1f}s")


# --- 2. detector vs oracle -------------------------------------------------

def _score_vectors(n, seed=0):
    rng = np.random.default_rng(seed)
    levels = np.array([0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0])
    for k in range(n):
        T = int(rng.integers(1, 51))
        if k % 2:
            yield levels[rng.integers(0, len(levels), T)]  # heavy ties
        else:
            yield rng.random(T)


def test_criterion_2_detector_matches_oracle(capsys):
    start = time.perf_counter()
    mismatches = sum(detect_completion_weak(s) != detect_completion_weak_oracle(s) for s in _score_vectors(10_000))
    seconds = time.perf_counter() - start
    _report(capsys, 2, "detector oracle equivalence", mismatches == 0 and seconds < 10,
            f"10000 vectors, {mismatches} mismatches, {seconds:.1f}s")


# --- 3. supervised identity ------------------------------------------------

def test_criterion_3_supervised_identity(capsys):
    rng = np.random.default_rng(3)
    worst, cases = 0.0, 0
    for T in range(1, 101):
        t = np.arange(1, T + 1)
        for tau in range(1, T + 1):
            r = (t - tau) / tau
            for a in (rng.dirichlet(np.ones(T)), np.eye(T)[rng.integers(T)], np.full(T, 1 / T)):
                worst = max(worst, abs(supervised_estimate(a, r) - tau))
                cases += 1
    _report(capsys, 3, "supervised identity", worst < 1e-9, f"{cases} cases, worst |y - tau| {worst:.2e}")


# --- 4. metric identity ----------------------------------------------------

def test_criterion_4_metric_identity(capsys):
    bad = 0
    for T in range(1, 13):
        for y in range(1, T + 2):
            for tau in range(1, T + 2):
                bad += sequence_accuracy(y, tau, T) + relative_distance(y, tau, T) != 1.0
    rng = np.random.default_rng(4)
    for _ in range(10_000):
        T = int(rng.integers(13, 10**7))
        y, tau = (int(v) for v in rng.integers(1, T + 2, 2))
        bad += sequence_accuracy(y, tau, T) + relative_distance(y, tau, T) != 1.0
    worked = (sequence_accuracy(8, 6, 10), relative_distance(8, 6, 10))
    ok = bad == 0 and worked == (0.8, 0.2)
    _report(capsys, 4, "metric identity", ok, f"{bad} violations, worked example accuracy/RD {worked}")


# --- 5 and 6. end-to-end benchmark -----------------------------------------

@pytest.fixture(scope="module")
def bench_data():
    cache = {}

    def get(seed):
        if seed not in cache:
            spec = benchmark.BenchmarkSpec(seed=seed)
            start = time.perf_counter()
            cache[seed] = (spec, benchmark.prepare(spec), time.perf_counter() - start)
        return cache[seed]
    return get


def _run_benchmark(bench_data, mode):
    rows, seconds = [], 0.0
    for seed in SEEDS:
        spec, data, prep = bench_data(seed)
        result = benchmark.run(data, mode, spec)
        seconds += prep + result.seconds
        rows.append((seed, data.bayes_accuracy, result.rd[UNIFORM], result.rd[LEARNT]))
    return rows, seconds


def _table(rows):
    return "; ".join(f"seed {s}: bayes {b:.3f} U {u:.4f} Att {a:.4f}" for s, b, u, a in rows)


def test_criterion_5_weak_benchmark(capsys, bench_data):
    rows, seconds = _run_benchmark(bench_data, WEAK)
    calibrated = all(abs(b - 0.9) < 0.01 for _, b, _, _ in rows)
    mean_att = float(np.mean([a for _, _, _, a in rows]))
    wins = sum(a <= 0.15 and a < u for _, _, u, a in rows)
    ok = calibrated and wins == 3 and seconds < BENCH_BUDGET
    _report(capsys, 5, "weak benchmark", ok,
            f"{_table(rows)}; Att RD <= 0.15 and Att < U on {wins}/3 seeds (need 3), "
            f"Att RD over seeds {mean_att:.4f}, {seconds:.0f}s")


def test_criterion_6_supervised_benchmark(capsys, bench_data):
    rows, seconds = _run_benchmark(bench_data, SUPERVISED)
    calibrated = all(abs(b - 0.9) < 0.01 for _, b, _, _ in rows)
    mean_att = float(np.mean([a for _, _, _, a in rows]))
    wins = sum(a <= u and a <= 0.10 for _, _, u, a in rows)
    ok = calibrated and wins >= 2 and seconds < BENCH_BUDGET
    _report(capsys, 6, "supervised benchmark", ok,
            f"{_table(rows)}; Att RD <= 0.10 and Att <= U on {wins}/3 seeds (need 2), "
            f"Att RD over seeds {mean_att:.4f}, {seconds:.0f}s")


# --- 7. reproducibility ----------------------------------------------------

SMALL_SPEC = {"num_complete": 8, "num_incomplete": 8, "t_range": [12, 16], "d_raw": 3,
              "post_mean": [1.5, 1.5, 1.5], "tau_fraction_range": [0.3, 0.8], "seed": 7}


def _pipeline(root, spec_path):
    def run(*argv):
        assert main([str(a) for a in argv]) == 0
    run("synth", "--spec", spec_path, "--out", root / "data")
    run("train-features", "--manifest", root / "data/manifest.jsonl", "--out", root / "clf/clf.cmfc",
        "--epochs", 3, "--d-feat", 4)
    feats = root / "clf/features/manifest.jsonl"
    outputs = [root / "data/manifest.jsonl", root / "clf/clf.cmfc", feats]
    for mode in (WEAK, SUPERVISED):
        ckpt = root / f"{mode}.cmck"
        run("train", "--manifest", feats, "--out", ckpt, "--mode", mode, "--hidden", 4, "--epochs", 2,
            "--joint-epochs", 1)
        run("infer", "--ckpt", ckpt, "--manifest", feats, "--out", root / f"pred-{mode}")
        run("eval", "--ckpt", ckpt, "--manifest", feats, "--out", root / f"report-{mode}")
        outputs += [ckpt, root / f"pred-{mode}/predictions.csv", root / f"report-{mode}.csv",
                    root / f"report-{mode}.txt", root / f"report-{mode}.records.csv"]
    outputs += sorted((root / "data/raw").iterdir()) + sorted((root / "clf/features").glob("*.cmft"))
    return outputs


def test_criterion_7_reproducibility(capsys, tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(SMALL_SPEC))
    first = _pipeline(tmp_path / "a", spec_path)
    second = _pipeline(tmp_path / "b", spec_path)
    differing = [str(p.relative_to(tmp_path / "a")) for p, q in zip(first, second) if p.read_bytes() != q.read_bytes()]
    ok = len(first) == len(second) and not differing
    _report(capsys, 7, "reproducibility", ok, f"{len(first)} artefacts compared, differing: {differing or 'none'}")


# --- 8. format round trips -------------------------------------------------

def _rewrite_identical(path, read, write):
    original = path.read_bytes()
    again = path.with_name("again-" + path.name)
    write(again, read(path))
    return again.read_bytes() == original


def test_criterion_8_format_round_trips(capsys, tmp_path):
    rng = np.random.default_rng(8)
    checks = {}
    for k, shape in enumerate([(1, 1), (40, 16), (57, 3)]):
        write_features(tmp_path / f"f{k}.cmft", rng.standard_normal(shape))
        checks[f"features {shape}"] = _rewrite_identical(tmp_path / f"f{k}.cmft", read_features, write_features)
        write_raw(tmp_path / f"r{k}.cmrw", rng.standard_normal(shape))
        checks[f"raw {shape}"] = _rewrite_identical(tmp_path / f"r{k}.cmrw", read_raw, write_raw)
    (tmp_path / "m.jsonl").write_text(
        '{"id": "a", "action": "open", "label": "complete", "tau": 4, "features": "f0.cmft"}\n'
        '{"id": "b", "action": "open", "label": "incomplete", "tau": null, "features": "sub/f1.cmft"}\n')
    checks["manifest"] = _rewrite_identical(tmp_path / "m.jsonl", read_manifest, write_manifest)
    for mode in (WEAK, SUPERVISED):
        p = ModelParams.initialize(16, 8, 40, rng, mode, LOG if mode == WEAK else "literal")
        save_model(tmp_path / f"{mode}.cmck", p)
        checks[f"checkpoint {mode}"] = _rewrite_identical(tmp_path / f"{mode}.cmck", load_model, save_model)
    data = encode_classifier(FrameClassifier.initialize(8, 16, rng))
    checks["classifier checkpoint"] = encode_classifier(decode_classifier(data)) == data
    failed = [k for k, v in checks.items() if not v]
    _report(capsys, 8, "format round trips", not failed, f"{len(checks)} files, failed: {failed or 'none'}")
