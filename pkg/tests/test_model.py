import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from completion_moment.errors import ConfigError
from completion_moment.model import (
    ATTENTION_PARAMS,
    LITERAL,
    LOG,
    PARAM_NAMES,
    SCORE_PARAMS,
    SUPERVISED,
    WEAK,
    FrameTrace,
    ModelParams,
    ReferenceObjective,
    TrainConfig,
    TrainingSample,
    check_trainable,
    forward,
    loss_and_grads,
    relative_targets,
    supervised_loss,
    supervised_target,
    train,
    weak_loss,
    weak_sequence_prediction,
)
from completion_moment.numerics import EXTENDED, ShapeError, compare_gradients, finite_difference_gradient, sigmoid


def _params(seed=0, D=5, H=8, T=8, mode=WEAK):
    return ModelParams.initialize(D, H, T, np.random.default_rng(seed), mode)


def _trace(o_a, o_s):
    o_a, o_s = np.asarray(o_a, float), np.asarray(o_s, float)
    e = np.exp(o_a - o_a.max())
    a = e / e.sum()
    return FrameTrace(o_a, o_s, a, sigmoid(a * o_s))


# --- forward ---------------------------------------------------------------

def test_zero_projections_give_neutral_trace():
    p = _params()
    for name in ("attention.proj_w", "score.proj_w"):
        p.tensors[name][:] = 0
    tr = forward(p, np.random.default_rng(1).standard_normal((8, 5)))
    assert np.array_equal(tr.o_a, np.zeros(8)) and np.array_equal(tr.o_s, np.zeros(8))
    assert np.allclose(tr.a, 1 / 8, rtol=0, atol=1e-15) and np.array_equal(tr.s, np.full(8, 0.5))


def test_score_closed_form():
    tr = _trace([0.0, 0.0], [2 * math.log(3), 0.0])
    assert tr.s[0] == pytest.approx(0.75, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_forward_attention_sums_to_one(seed):
    tr = forward(_params(seed), np.random.default_rng(seed).standard_normal((8, 5)) * 3)
    assert abs(tr.a.sum() - 1) < 1e-9 and np.all((tr.s > 0) & (tr.s < 1))


def test_forward_rejects_wrong_length():
    with pytest.raises(ShapeError):
        forward(_params(), np.zeros((7, 5)))


def test_param_layout():
    p = _params(D=3, H=4, T=6)
    assert tuple(p.tensors) == PARAM_NAMES
    assert p.tensors["score.input_weights"].shape == (16, 3)
    assert p.tensors["attention.proj_w"].shape == (1, 4) and p.tensors["attention.proj_b"].shape == (1,)
    assert set(ATTENTION_PARAMS) | set(SCORE_PARAMS) == set(PARAM_NAMES)
    sup = _params(mode=SUPERVISED)
    assert np.array_equal(sup.tensors["attention.proj_w"], np.zeros((1, 8)))


# --- losses ----------------------------------------------------------------

def test_weak_prediction_examples():
    assert weak_sequence_prediction(_trace([0, 0], [0, 0])) == 0.5
    assert weak_sequence_prediction(_trace([0, 0], [math.log(3), math.log(3)])) == pytest.approx(0.75)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.floats(-50, 50))
def test_weak_prediction_shift_invariant(o, c):
    o_s = np.linspace(-1, 1, len(o))
    base = weak_sequence_prediction(_trace(o, o_s))
    assert abs(weak_sequence_prediction(_trace(np.asarray(o) + c, o_s)) - base) < 1e-9


def test_weak_loss_examples():
    sure = _trace([0.0], [800.0])
    assert weak_loss([(sure, 1)]) == -1.0
    half = _trace([0.0, 0.0], [0.0, 0.0])
    assert weak_loss([(half, 1)], LITERAL) == -0.5
    assert weak_loss([(half, 1)], LOG) == pytest.approx(math.log(2))
    assert weak_loss([(half, 0)], LITERAL) == -0.5
    with pytest.raises(ConfigError):
        weak_loss([(half, 2)])


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=10), st.integers(0, 1))
def test_literal_term_in_range(o_s, y):
    assert -1.0 <= weak_loss([(_trace(np.zeros(len(o_s)), o_s), y)]) <= 0.0


def test_log_variant_clamped():
    tr = _trace([0.0], [-1e4])
    assert weak_loss([(tr, 1)], LOG) == pytest.approx(-math.log(1e-12))


def test_supervised_loss_examples():
    T = 2
    assert supervised_loss(_trace([0, 0], [0, 0]), 2) == pytest.approx(0.125, abs=1e-15)
    r = relative_targets(3, 6)
    assert supervised_loss(_trace(np.zeros(6), r), 3) == 0.0
    # attention concentrated on frame 1
    tr = _trace([800.0, 0, 0], [0.0, 5.0, -9.0])
    assert supervised_loss(tr, 2) == pytest.approx((0 - (1 - 2) / 2) ** 2)
    with pytest.raises(ValueError):
        relative_targets(0, T)


@given(st.integers(1, 30), st.data())
def test_supervised_loss_nonnegative(T, data):
    tau = data.draw(st.integers(1, T))
    o_s = data.draw(st.lists(st.floats(-3, 3), min_size=T, max_size=T))
    o_a = data.draw(st.lists(st.floats(-3, 3), min_size=T, max_size=T))
    assert supervised_loss(_trace(o_a, o_s), tau) >= 0


def test_recorded_losses_match_direct_evaluation():
    p = _params(3)
    X = np.random.default_rng(3).standard_normal((8, 5))
    tr = forward(p, X)
    for y in (0, 1):
        for v in (LITERAL, LOG):
            assert loss_and_grads(p, X, y, WEAK, v)[0] == pytest.approx(weak_loss([(tr, y)], v), abs=1e-14)
    assert loss_and_grads(p, X, 4, SUPERVISED)[0] == pytest.approx(supervised_loss(tr, 4), abs=1e-14)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("kind,variant,target", [(WEAK, LITERAL, 1), (WEAK, LOG, 0), (SUPERVISED, LITERAL, 3)])
def test_loss_gradients_match_finite_differences(seed, kind, variant, target):
    rng = np.random.default_rng(seed)
    p = ModelParams.initialize(5, 8, 8, rng)
    X = rng.standard_normal((8, 5))
    _, grads = loss_and_grads(p, X, target, kind, variant)
    num = finite_difference_gradient(ReferenceObjective(X, target, kind, variant), p.tensors, 1e-5, EXTENDED)
    report = compare_gradients(grads, num, 1e-5)
    assert report.passed, report.errors


def test_uniform_attention_blocks_attention_gradients():
    p = _params(2)
    X = np.random.default_rng(2).standard_normal((8, 5))
    _, grads = loss_and_grads(p, X, 5, SUPERVISED, uniform_attention=True)
    assert all(not np.any(grads[n]) for n in ATTENTION_PARAMS)
    assert any(np.any(grads[n]) for n in SCORE_PARAMS)


# --- training --------------------------------------------------------------

def _toy_samples(n=16, T=10, D=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        label = k % 2
        X = rng.standard_normal((T, D)) * 0.3
        tau = int(rng.integers(3, 8)) if label else None
        if label:
            X[tau - 1:] += 1.0
        out.append(TrainingSample(X, label, tau, f"s{k:02d}", "toy"))
    return out


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert [cfg.learning_rate(e) for e in range(7)] == [1e-2] * 5 + [1e-2 * 0.1] * 2
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(mode="other")


def test_zero_epochs_returns_init():
    samples = _toy_samples()
    cfg = TrainConfig(weak_epochs=0, hidden=4, seed=3)
    p, hist = train(samples, cfg)
    init = ModelParams.initialize(3, 4, 10, np.random.default_rng(np.random.SeedSequence(3).spawn(2)[0]))
    assert all(np.array_equal(p.tensors[n], init.tensors[n]) for n in PARAM_NAMES)
    assert hist.epochs == []


@pytest.mark.parametrize("mode", [WEAK, SUPERVISED])
def test_training_is_deterministic(mode):
    samples = _toy_samples()
    cfg = TrainConfig(mode=mode, weak_epochs=2, score_epochs=1, joint_epochs=1, hidden=4, seed=5)
    p1, h1 = train(samples, cfg)
    p2, h2 = train(samples, cfg)
    assert h1.losses() == h2.losses()
    assert all(p1.tensors[n].tobytes() == p2.tensors[n].tobytes() for n in PARAM_NAMES)


def test_weak_training_reduces_loss():
    _, hist = train(_toy_samples(24), TrainConfig(weak_epochs=6, hidden=8, lr=0.1, seed=1))
    losses = hist.losses("joint")
    assert len(losses) == 6 and losses[-1] < losses[0]


def test_supervised_schedule_phases():
    cfg = TrainConfig(mode=SUPERVISED, score_epochs=3, joint_epochs=2, decay_after=2, hidden=4)
    p, hist = train(_toy_samples(), cfg)
    assert [(e["phase"], e["epoch"], e["lr"]) for e in hist.epochs] == [
        ("score", 1, 1e-2), ("score", 2, 1e-2), ("score", 3, 1e-3), ("joint", 1, 1e-2), ("joint", 2, 1e-2)]


def test_score_phase_leaves_attention_untouched():
    cfg = TrainConfig(mode=SUPERVISED, score_epochs=2, joint_epochs=0, hidden=4, seed=2)
    p, _ = train(_toy_samples(), cfg)
    p0, _ = train(_toy_samples(), TrainConfig(mode=SUPERVISED, score_epochs=0, joint_epochs=0, hidden=4, seed=2))
    assert all(np.array_equal(p.tensors[n], p0.tensors[n]) for n in ATTENTION_PARAMS)
    assert not np.array_equal(p.tensors["score.proj_w"], p0.tensors["score.proj_w"])


def test_training_preconditions():
    samples = _toy_samples()
    with pytest.raises(ConfigError):
        check_trainable([s for s in samples if s.label == 1], WEAK)
    with pytest.raises(ConfigError):
        check_trainable([], WEAK)
    broken = [TrainingSample(samples[1].features, 1, None, "x", "toy")]
    with pytest.raises(ConfigError):
        check_trainable(broken, SUPERVISED)
    with pytest.raises(ShapeError):
        train(samples + [TrainingSample(np.zeros((9, 3)), 0, None, "bad", "toy")], TrainConfig(hidden=4))


def test_incomplete_sequences_regress_to_sequence_end():
    assert supervised_target(TrainingSample(np.zeros((10, 2)), 0), 10) == 10
    assert supervised_target(TrainingSample(np.zeros((10, 2)), 1, 4), 10) == 4
