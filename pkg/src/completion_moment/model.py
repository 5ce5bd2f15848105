"""Attention and completion-score recurrent networks, their losses and training."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .numerics import (
    EXTENDED, CellParams, ShapeError, Tape, affine, reference_sequence_forward, sequence_forward, sigmoid,
    temporal_softmax,
)

log = logging.getLogger(__name__)

WEAK, SUPERVISED = "weak", "supervised"
LITERAL, LOG = "literal", "log"
MODES = (WEAK, SUPERVISED)
VARIANTS = (LITERAL, LOG)
LOG_CLAMP = 1e-12

# fixed tensor order; checkpoints and SGD iterate in this order
PARAM_NAMES = (
    "attention.input_weights", "attention.recurrent_weights", "attention.biases",
    "attention.proj_w", "attention.proj_b",
    "score.input_weights", "score.recurrent_weights", "score.biases",
    "score.proj_w", "score.proj_b",
)
ATTENTION_PARAMS = tuple(n for n in PARAM_NAMES if n.startswith("attention."))
SCORE_PARAMS = tuple(n for n in PARAM_NAMES if n.startswith("score."))


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]
    d_feat: int
    hidden: int
    length: int
    mode: str = WEAK
    loss_variant: str = LITERAL

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.loss_variant not in VARIANTS:
            raise ConfigError(f"unknown loss variant {self.loss_variant!r}")
        missing = [n for n in PARAM_NAMES if n not in self.tensors]
        if missing:
            raise ShapeError(f"missing tensors: {missing}")
        H, D = self.hidden, self.d_feat
        for prefix in ("attention", "score"):
            cell = self.cell(prefix)
            if cell.hidden_size != H or cell.input_size != D:
                raise ShapeError(f"{prefix} cell is {cell.input_size}->{cell.hidden_size}, expected {D}->{H}")
            if self.tensors[f"{prefix}.proj_w"].shape != (1, H) or self.tensors[f"{prefix}.proj_b"].shape != (1,):
                raise ShapeError(f"{prefix} projection must map {H} -> 1")

    def cell(self, prefix: str) -> CellParams:
        t = self.tensors
        return CellParams(t[f"{prefix}.input_weights"], t[f"{prefix}.recurrent_weights"], t[f"{prefix}.biases"])

    def copy(self) -> "ModelParams":
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()})

    @classmethod
    def initialize(cls, d_feat: int, hidden: int, length: int, rng: np.random.Generator,
                   mode: str = WEAK, loss_variant: str = LITERAL) -> "ModelParams":
        """Random cells and projections; the attention projection is zero in supervised mode.

        The zero attention projection is what makes the first supervised phase
        see uniform attention.
        """
        k = 1.0 / np.sqrt(hidden)
        tensors = {}
        for prefix in ("attention", "score"):
            cell = CellParams.initialize(d_feat, hidden, rng)
            tensors[f"{prefix}.input_weights"] = cell.input_weights
            tensors[f"{prefix}.recurrent_weights"] = cell.recurrent_weights
            tensors[f"{prefix}.biases"] = cell.biases
            tensors[f"{prefix}.proj_w"] = rng.uniform(-k, k, size=(1, hidden))
            tensors[f"{prefix}.proj_b"] = np.zeros(1)
        if mode == SUPERVISED:
            tensors["attention.proj_w"][:] = 0.0
        return cls(tensors, d_feat, hidden, length, mode, loss_variant)


@dataclass
class FrameTrace:
    o_a: np.ndarray
    o_s: np.ndarray
    a: np.ndarray
    s: np.ndarray

    @property
    def length(self) -> int:
        return self.o_a.shape[0]


def _check_input(p: ModelParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape != (p.length, p.d_feat):
        raise ShapeError(f"expected a ({p.length}, {p.d_feat}) sequence, got {X.shape}")
    return X


def raw_outputs(p: ModelParams, X) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame outputs of the attention and score networks."""
    X = _check_input(p, X)
    t = p.tensors
    Ha = sequence_forward(X, p.cell("attention"))
    Hs = sequence_forward(X, p.cell("score"))
    o_a = affine(Ha, t["attention.proj_w"], t["attention.proj_b"])[:, 0]
    o_s = affine(Hs, t["score.proj_w"], t["score.proj_b"])[:, 0]
    return o_a, o_s


def forward(p: ModelParams, X) -> FrameTrace:
    o_a, o_s = raw_outputs(p, X)
    a = temporal_softmax(o_a)
    return FrameTrace(o_a, o_s, a, sigmoid(a * o_s))


def weak_sequence_prediction(trace: FrameTrace) -> float:
    return sigmoid(float(np.dot(trace.a, trace.o_s)))


def weak_loss(batch: Iterable[tuple[FrameTrace, int]], variant: str = LITERAL) -> float:
    """Sequence-level loss over ``(trace, y)`` pairs, y in {0, 1}.

    ``literal`` sums ``-(y p + (1 - y)(1 - p))``; ``log`` is the usual binary
    cross-entropy with p clamped away from 0 and 1.
    """
    total = 0.0
    for trace, y in batch:
        total += _weak_term(weak_sequence_prediction(trace), y, variant)
    return total


def _weak_term(p_hat: float, y: int, variant: str) -> float:
    if y not in (0, 1):
        raise ConfigError(f"label must be 0 or 1, got {y!r}")
    if variant == LITERAL:
        return -(y * p_hat + (1 - y) * (1.0 - p_hat))
    if variant == LOG:
        p_hat = min(max(p_hat, LOG_CLAMP), 1.0 - LOG_CLAMP)
        return -(y * np.log(p_hat) + (1 - y) * np.log(1.0 - p_hat))
    raise ConfigError(f"unknown loss variant {variant!r}")


def relative_targets(tau: int, T: int) -> np.ndarray:
    if tau < 1:
        raise ValueError(f"completion moment must be >= 1, got {tau}")
    t = np.arange(1, T + 1, dtype=np.float64)
    return (t - tau) / tau


def supervised_loss(trace: FrameTrace, tau: int) -> float:
    r = relative_targets(tau, trace.length)
    return float(np.sum(trace.a * (trace.o_s - r) ** 2))


# ---------------------------------------------------------------------------
# Recorded losses
# ---------------------------------------------------------------------------

def _record_outputs(tape: Tape, p: ModelParams, X, uniform_attention: bool = False):
    X = tape.const(_check_input(p, X))
    nodes = {name: tape.param(name, p.tensors[name]) for name in PARAM_NAMES}
    outs = {}
    for prefix in ("attention", "score"):
        Hn = tape.lstm(X, nodes[f"{prefix}.input_weights"], nodes[f"{prefix}.recurrent_weights"],
                       nodes[f"{prefix}.biases"])
        outs[prefix] = tape.column(tape.affine(Hn, nodes[f"{prefix}.proj_w"], nodes[f"{prefix}.proj_b"]))
    if uniform_attention:
        a = tape.const(np.full(p.length, 1.0 / p.length))
    else:
        a = tape.temporal_softmax(outs["attention"])
    return a, outs["score"]


def record_weak_loss(tape: Tape, p: ModelParams, X, y: int, variant: str | None = None):
    variant = variant or p.loss_variant
    a, o_s = _record_outputs(tape, p, X)
    p_hat = tape.sigmoid(tape.sum(tape.mul(a, o_s)))
    if variant == LITERAL:
        # -(y p + (1-y)(1-p)) = (1-2y) p - (1-y)
        return tape.shift(tape.scale(p_hat, 1.0 - 2.0 * y), -(1.0 - y))
    if variant == LOG:
        p_hat = tape.clip(p_hat, LOG_CLAMP, 1.0 - LOG_CLAMP)
        if y == 1:
            return tape.scale(tape.log(p_hat), -1.0)
        return tape.scale(tape.log(tape.shift(tape.scale(p_hat, -1.0), 1.0)), -1.0)
    raise ConfigError(f"unknown loss variant {variant!r}")


def record_supervised_loss(tape: Tape, p: ModelParams, X, tau: int, uniform_attention: bool = False):
    a, o_s = _record_outputs(tape, p, X, uniform_attention)
    r = tape.const(relative_targets(tau, p.length))
    return tape.sum(tape.mul(a, tape.square(tape.sub(o_s, r))))


def loss_and_grads(p: ModelParams, X, target: int, kind: str, variant: str | None = None,
                   uniform_attention: bool = False) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients for one sequence.

    ``target`` is the label y for ``kind="weak"`` and tau for
    ``kind="supervised"``.
    """
    tape = Tape()
    if kind == WEAK:
        loss = record_weak_loss(tape, p, X, target, variant)
    elif kind == SUPERVISED:
        loss = record_supervised_loss(tape, p, X, target, uniform_attention)
    else:
        raise ConfigError(f"unknown loss kind {kind!r}")
    grads = tape.backward(loss)
    return float(loss.value), grads


class ReferenceObjective:
    """Single-sequence loss through the extended-precision reference path.

    Objective for finite-difference checks: ``f(tensors)`` returns a
    ``dtype`` scalar. Each network's output is memoised on the bytes of its
    own tensors, so perturbing one network does not re-run the other.
    """

    def __init__(self, X, target: int, kind: str, variant: str = LITERAL, dtype=EXTENDED,
                 uniform_attention: bool = False):
        self.X = np.asarray(X, dtype=dtype)
        self.target, self.kind, self.variant = target, kind, variant
        self.dtype, self.uniform_attention = dtype, uniform_attention
        self._memo: dict[str, tuple[bytes, np.ndarray]] = {}

    def _network(self, tensors, prefix: str) -> np.ndarray:
        names = [n for n in PARAM_NAMES if n.startswith(prefix + ".")]
        key = b"".join(np.asarray(tensors[n], dtype=self.dtype).tobytes() for n in names)
        hit = self._memo.get(prefix)
        if hit is not None and hit[0] == key:
            return hit[1]
        Hn = reference_sequence_forward(self.X, tensors[f"{prefix}.input_weights"],
                                        tensors[f"{prefix}.recurrent_weights"], tensors[f"{prefix}.biases"],
                                        self.dtype)
        w = np.asarray(tensors[f"{prefix}.proj_w"], dtype=self.dtype)[0]
        out = Hn @ w + np.asarray(tensors[f"{prefix}.proj_b"], dtype=self.dtype)[0]
        self._memo[prefix] = (key, out)
        return out

    def __call__(self, tensors):
        dtype = self.dtype
        one = dtype(1)
        T = self.X.shape[0]
        o_s = self._network(tensors, "score")
        if self.uniform_attention:
            a = np.full(T, one / T, dtype=dtype)
        else:
            o_a = self._network(tensors, "attention")
            e = np.exp(o_a - o_a.max())
            a = e / e.sum()
        if self.kind == SUPERVISED:
            r = (np.arange(1, T + 1).astype(dtype) - self.target) / dtype(self.target)
            return np.sum(a * (o_s - r) ** 2)
        p_hat = one / (one + np.exp(-np.sum(a * o_s)))
        y = self.target
        if self.variant == LITERAL:
            return -(y * p_hat + (1 - y) * (one - p_hat))
        p_hat = min(max(p_hat, dtype(LOG_CLAMP)), one - dtype(LOG_CLAMP))
        return -(y * np.log(p_hat) + (1 - y) * np.log(one - p_hat))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    mode: str = WEAK
    weak_epochs: int = 10
    score_epochs: int = 10   # supervised phase 1, score network alone
    joint_epochs: int = 5    # supervised phase 2, both networks
    lr: float = 1e-2
    decay_after: int = 5
    decay_factor: float = 0.1
    loss_variant: str = LITERAL
    hidden: int = 128
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.loss_variant not in VARIANTS:
            raise ConfigError(f"loss variant must be one of {VARIANTS}, got {self.loss_variant!r}")
        if not self.lr > 0 or not self.decay_factor > 0:
            raise ConfigError("learning rates must be positive")
        if min(self.weak_epochs, self.score_epochs, self.joint_epochs, self.decay_after) < 0 or self.hidden < 1:
            raise ConfigError("epoch counts must be >= 0 and hidden >= 1")

    def learning_rate(self, epoch: int) -> float:
        """Rate for the 0-based ``epoch`` of the current phase."""
        return self.lr if epoch < self.decay_after else self.lr * self.decay_factor


@dataclass
class TrainingSample:
    features: np.ndarray
    label: int
    tau: int | None = None
    id: str = ""
    action: str = ""


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)

    def log(self, phase: str, epoch: int, lr: float, mean_loss: float):
        self.epochs.append({"phase": phase, "epoch": epoch, "lr": lr, "mean_loss": mean_loss})
        log.info("%s epoch %d lr=%g mean loss=%.6f", phase, epoch, lr, mean_loss)

    def losses(self, phase: str | None = None) -> list[float]:
        return [e["mean_loss"] for e in self.epochs if phase is None or e["phase"] == phase]


def check_trainable(samples: Sequence[TrainingSample], mode: str):
    if not samples:
        raise ConfigError("empty training set")
    if mode == WEAK:
        by_action: dict[str, set] = {}
        for s in samples:
            by_action.setdefault(s.action, set()).add(s.label)
        lacking = sorted(a for a, labels in by_action.items() if labels != {0, 1})
        if lacking:
            raise ConfigError(f"weak training needs complete and incomplete sequences; action(s) {lacking} lack one")
    else:
        missing = [s.id for s in samples if s.label == 1 and s.tau is None]
        if missing:
            raise ConfigError(f"supervised training needs tau for complete sequences: {missing[:5]}")


def supervised_target(sample: TrainingSample, T: int) -> int:
    """Completion moment used as the regression anchor; incomplete sequences complete at T."""
    if sample.label == 0:
        return T
    return int(sample.tau)


def _sgd_epoch(p: ModelParams, samples, order, kind, lr, names, variant, uniform_attention=False) -> float:
    total = 0.0
    for idx in order:
        s = samples[idx]
        target = s.label if kind == WEAK else supervised_target(s, p.length)
        loss, grads = loss_and_grads(p, s.features, target, kind, variant, uniform_attention)
        total += loss
        for name in names:
            p.tensors[name] -= lr * grads[name]
    return total / len(samples)


def train(samples: Sequence[TrainingSample], config: TrainConfig, length: int | None = None,
          init: ModelParams | None = None) -> tuple[ModelParams, TrainHistory]:
    """Per-sequence SGD following the weak or supervised schedule.

    Samples must already share one length ``length`` (defaults to the first
    sample's). Weak mode trains both networks jointly on the sequence-level
    loss; supervised mode trains the score network alone under uniform
    attention, then both networks jointly on the attention-weighted
    regression loss.
    """
    check_trainable(samples, config.mode)
    length = length or samples[0].features.shape[0]
    d_feat = samples[0].features.shape[1]
    for s in samples:
        if s.features.shape != (length, d_feat):
            raise ShapeError(f"sample {s.id!r} has shape {s.features.shape}, expected {(length, d_feat)}")

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    init_rng, order_rng = (np.random.default_rng(s) for s in seeds)
    if init is None:
        p = ModelParams.initialize(d_feat, config.hidden, length, init_rng, config.mode, config.loss_variant)
    else:
        p = init.copy()
    history = TrainHistory()

    def order():
        idx = np.arange(len(samples))
        if config.shuffle:
            order_rng.shuffle(idx)
        return idx

    if config.mode == WEAK:
        for epoch in range(config.weak_epochs):
            lr = config.learning_rate(epoch)
            loss = _sgd_epoch(p, samples, order(), WEAK, lr, PARAM_NAMES, config.loss_variant)
            history.log("joint", epoch + 1, lr, loss)
    else:
        for epoch in range(config.score_epochs):
            lr = config.learning_rate(epoch)
            loss = _sgd_epoch(p, samples, order(), SUPERVISED, lr, SCORE_PARAMS, None, uniform_attention=True)
            history.log("score", epoch + 1, lr, loss)
        for epoch in range(config.joint_epochs):
            lr = config.learning_rate(epoch)
            loss = _sgd_epoch(p, samples, order(), SUPERVISED, lr, PARAM_NAMES, None)
            history.log("joint", epoch + 1, lr, loss)
    return p, history
