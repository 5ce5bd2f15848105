"""Seeded synthetic benchmark: generate, learn frame features, train, evaluate.

One call builds a labelled train/test split from planted-change sequences,
fits the frame classifier on the training raws, extracts features for both
splits, resamples them to a fixed length and trains the completion model in
the requested mode. The report compares uniform and learnt attention.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .evaluation import Report, evaluate
from .features import (
    ClassifierConfig,
    FrameClassifier,
    LabeledSequence,
    SynthSpec,
    empirical_bayes_accuracy,
    extract_features,
    generate_synthetic_dataset,
    noise_for_bayes_accuracy,
    resample_sequence,
    train_frame_classifier,
)
from .inference import LEARNT, UNIFORM
from .model import MODES, ModelParams, TrainConfig, TrainingSample, train

log = logging.getLogger(__name__)


@dataclass
class BenchmarkSpec:
    seed: int = 0
    num_train: int = 200
    num_test: int = 100
    t_range: tuple[int, int] = (40, 60)
    length: int = 40
    d_raw: int = 8
    d_feat: int = 16
    bayes_accuracy: float = 0.9
    tau_fraction_range: tuple[float, float] = (0.3, 0.8)
    hidden: int = 128

    def synth_spec(self) -> SynthSpec:
        """Balanced classes; means differ by a unit-noise separation along the diagonal."""
        n = self.num_train + self.num_test
        if self.num_train < 2 or self.num_test < 1:
            raise ConfigError("benchmark needs at least two training and one test sequence")
        if not 0.5 < self.bayes_accuracy < 1:
            raise ConfigError("bayes_accuracy must lie in (0.5, 1)")
        sep = 1.0 / noise_for_bayes_accuracy(1.0, self.bayes_accuracy)
        direction = np.ones(self.d_raw) / np.sqrt(self.d_raw)
        return SynthSpec(
            num_complete=n - n // 2, num_incomplete=n // 2, t_range=self.t_range, d_raw=self.d_raw,
            pre_mean=[0.0] * self.d_raw, post_mean=list(direction * sep), noise_std=1.0,
            tau_fraction_range=self.tau_fraction_range, seed=self.seed, action="synthetic",
        )


@dataclass
class BenchmarkData:
    train: list[LabeledSequence]
    test: list[LabeledSequence]
    classifier: FrameClassifier
    bayes_accuracy: float


@dataclass
class BenchmarkResult:
    mode: str
    params: ModelParams
    report: Report
    seconds: float
    losses: list[float] = field(default_factory=list)

    @property
    def rd(self) -> dict[str, float]:
        return dict(self.report.total.rd)

    @property
    def accuracy(self) -> dict[str, float]:
        return dict(self.report.total.accuracy)


def split_indices(n: int, num_test: int) -> tuple[list[int], list[int]]:
    """Every k-th sequence goes to the test split so both classes are represented."""
    step = n / num_test
    test = sorted({min(n - 1, int((k + 1) * step) - 1) for k in range(num_test)})
    test_set = set(test)
    return [i for i in range(n) if i not in test_set], test


def prepare(spec: BenchmarkSpec) -> BenchmarkData:
    synth = spec.synth_spec()
    raws, records = generate_synthetic_dataset(synth)
    train_idx, test_idx = split_indices(len(raws), spec.num_test)
    clf_seed, bayes_seed = np.random.SeedSequence(spec.seed).spawn(2)
    clf, history = train_frame_classifier(
        [raws[i] for i in train_idx], [records[i].label for i in train_idx],
        ClassifierConfig(d_feat=spec.d_feat, seed=int(clf_seed.generate_state(1)[0])),
    )
    log.info("frame classifier final loss %.4f", history.mean_loss[-1] if history.mean_loss else float("nan"))

    def labelled(i: int) -> LabeledSequence:
        r = records[i]
        # features pass through the float32 file format in the file-based pipeline
        feats = extract_features(clf, raws[i]).astype(np.float32).astype(np.float64)
        return resample_sequence(LabeledSequence(feats, r.label, r.id, r.action, r.tau), spec.length)

    bayes = empirical_bayes_accuracy(synth, seed=int(bayes_seed.generate_state(1)[0]))
    return BenchmarkData([labelled(i) for i in train_idx], [labelled(i) for i in test_idx], clf, bayes)


def run(data: BenchmarkData, mode: str, spec: BenchmarkSpec, **overrides) -> BenchmarkResult:
    """Train one model on ``data.train`` and score it on ``data.test`` with both attentions."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    start = time.perf_counter()
    samples = [TrainingSample(s.features, s.label, s.tau, s.id, s.action) for s in data.train]
    config = TrainConfig(mode=mode, hidden=spec.hidden, seed=spec.seed, **overrides)
    params, history = train(samples, config, length=spec.length)
    _, report = evaluate(data.test, params, mode, attention=(UNIFORM, LEARNT))
    return BenchmarkResult(mode, params, report, time.perf_counter() - start, history.losses())
