"""Per-frame features: synthetic data, frame classifier, extraction and resampling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .numerics import ShapeError, Tape, affine, sigmoid

log = logging.getLogger(__name__)

COMPLETE, INCOMPLETE_LABEL = 1, 0


@dataclass
class RawSequence:
    frames: np.ndarray
    id: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or min(self.frames.shape) < 1:
            raise ShapeError(f"raw sequence {self.id!r} must be T x D with T, D >= 1, got {self.frames.shape}")


@dataclass
class LabeledSequence:
    features: np.ndarray
    label: int
    id: str
    action: str = "action"
    tau: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.label not in (0, 1):
            raise ConfigError(f"{self.id}: label must be 0 or 1")
        if self.tau is not None:
            if self.label != COMPLETE:
                raise ConfigError(f"{self.id}: only complete sequences carry a completion moment")
            if not 1 <= self.tau <= self.length:
                raise ConfigError(f"{self.id}: tau={self.tau} outside 1..{self.length}")

    @property
    def length(self) -> int:
        return self.features.shape[0]


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def resample_indices(T: int, L: int) -> list[int]:
    """1-based source frame for each of the L output frames."""
    if L < 1 or T < 1:
        raise ValueError("lengths must be >= 1")
    if L == 1:
        return [_round_half_up((T + 1) / 2)]
    return [_round_half_up(1 + k * (T - 1) / (L - 1)) for k in range(L)]


def remap_tau(tau: int, T: int, L: int) -> int:
    """Smallest output frame whose source frame is at or after ``tau``."""
    idx = resample_indices(T, L)
    for k, src in enumerate(idx, start=1):
        if src >= tau:
            return k
    return L


def resample_sequence(s: LabeledSequence, L: int) -> LabeledSequence:
    if s.length == L:
        return replace(s, features=s.features.copy())
    idx = resample_indices(s.length, L)
    tau = None if s.tau is None else remap_tau(s.tau, s.length, L)
    return replace(s, features=s.features[np.asarray(idx) - 1], tau=tau)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    num_complete: int = 100
    num_incomplete: int = 100
    t_range: tuple[int, int] = (40, 60)
    d_raw: int = 8
    pre_mean: list[float] | None = None
    post_mean: list[float] | None = None
    noise_std: float = 1.0
    tau_fraction_range: tuple[float, float] = (0.3, 0.8)
    seed: int = 0
    action: str = "synthetic"
    id_prefix: str = "seq"

    def __post_init__(self):
        self.t_range = tuple(int(v) for v in self.t_range)
        self.tau_fraction_range = tuple(float(v) for v in self.tau_fraction_range)
        if self.pre_mean is None:
            self.pre_mean = [0.0] * self.d_raw
        if self.post_mean is None:
            self.post_mean = [1.0] * self.d_raw
        self.pre_mean = [float(v) for v in self.pre_mean]
        self.post_mean = [float(v) for v in self.post_mean]

    def validate(self):
        lo, hi = self.t_range
        f_lo, f_hi = self.tau_fraction_range
        problems = []
        if self.num_complete < 0 or self.num_incomplete < 0 or self.num_complete + self.num_incomplete < 1:
            problems.append("need at least one sequence and non-negative counts")
        if not 1 <= lo <= hi:
            problems.append(f"t_range must satisfy 1 <= min <= max, got {self.t_range}")
        if self.d_raw < 1:
            problems.append("d_raw must be >= 1")
        if len(self.pre_mean) != self.d_raw or len(self.post_mean) != self.d_raw:
            problems.append("pre_mean and post_mean must have d_raw entries")
        if not self.noise_std >= 0:
            problems.append("noise_std must be >= 0")
        if not 0 < f_lo <= f_hi < 1:
            problems.append(f"tau_fraction_range must lie inside (0, 1), got {self.tau_fraction_range}")
        elif any(math.ceil(f_lo * T) > math.floor(f_hi * T) for T in range(lo, hi + 1)):
            problems.append("tau_fraction_range admits no integer frame for some lengths in t_range")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def separation(self) -> float:
        return float(np.linalg.norm(np.subtract(self.post_mean, self.pre_mean)))

    def bayes_accuracy(self) -> float:
        """Per-frame accuracy of the optimal pre/post classifier at equal priors."""
        if self.noise_std == 0:
            return 1.0 if self.separation > 0 else 0.5
        z = self.separation / (2.0 * self.noise_std)
        return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def noise_for_bayes_accuracy(separation: float, accuracy: float) -> float:
    """Isotropic noise level at which frames separated by ``separation`` reach ``accuracy``."""
    from statistics import NormalDist
    return separation / (2.0 * NormalDist().inv_cdf(accuracy))


@dataclass
class SynthRecord:
    id: str
    action: str
    label: int
    tau: int | None


def generate_synthetic_dataset(spec: SynthSpec) -> tuple[list[RawSequence], list[SynthRecord]]:
    """Planted-change sequences.

    Every sequence gets its own child generator and draws, in order, its
    length, a candidate completion frame and a T x D noise block, whatever its
    label; incomplete sequences ignore the candidate. Pre-completion frames of
    both classes therefore come from the same stream structure.
    """
    spec.validate()
    n = spec.num_complete + spec.num_incomplete
    children = np.random.SeedSequence(spec.seed).spawn(n)
    pre = np.asarray(spec.pre_mean)
    post = np.asarray(spec.post_mean)
    width = max(4, len(str(n - 1)))
    raws, records = [], []
    for k, child in enumerate(children):
        rng = np.random.default_rng(child)
        T = int(rng.integers(spec.t_range[0], spec.t_range[1] + 1))
        tau_lo = max(1, math.ceil(spec.tau_fraction_range[0] * T))
        tau_hi = min(T, math.floor(spec.tau_fraction_range[1] * T))
        tau = int(rng.integers(tau_lo, tau_hi + 1))
        noise = rng.standard_normal((T, spec.d_raw)) * spec.noise_std
        label = COMPLETE if k < spec.num_complete else INCOMPLETE_LABEL
        means = np.tile(pre, (T, 1))
        if label == COMPLETE:
            means[tau - 1:] = post
        sid = f"{spec.id_prefix}{k:0{width}d}"
        raws.append(RawSequence(means + noise, sid))
        records.append(SynthRecord(sid, spec.action, label, tau if label == COMPLETE else None))
    if spec.num_incomplete == 0:
        log.warning("no incomplete sequences generated; weak training will refuse this dataset")
    return raws, records


def empirical_bayes_accuracy(spec: SynthSpec, frames: int = 200_000, seed: int = 0) -> float:
    """Monte Carlo accuracy of the nearest-mean rule on balanced pre/post frames."""
    rng = np.random.default_rng(seed)
    pre = np.asarray(spec.pre_mean)
    post = np.asarray(spec.post_mean)
    half = frames // 2
    x_pre = pre + rng.standard_normal((half, spec.d_raw)) * spec.noise_std
    x_post = post + rng.standard_normal((half, spec.d_raw)) * spec.noise_std
    w = post - pre
    mid = 0.5 * (post + pre) @ w
    correct = np.sum(x_pre @ w < mid) + np.sum(x_post @ w >= mid)
    return float(correct) / (2 * half)


# ---------------------------------------------------------------------------
# Frame classifier
# ---------------------------------------------------------------------------

@dataclass
class FrameClassifier:
    hidden_w: np.ndarray  # (D_feat, D_raw)
    hidden_b: np.ndarray  # (D_feat,)
    head_w: np.ndarray    # (1, D_feat)
    head_b: np.ndarray    # (1,)

    TENSORS = ("hidden_w", "hidden_b", "head_w", "head_b")

    @property
    def d_raw(self) -> int:
        return self.hidden_w.shape[1]

    @property
    def d_feat(self) -> int:
        return self.hidden_w.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.TENSORS}

    def copy(self) -> "FrameClassifier":
        return FrameClassifier(**{k: v.copy() for k, v in self.tensors().items()})

    @classmethod
    def initialize(cls, d_raw: int, d_feat: int, rng: np.random.Generator) -> "FrameClassifier":
        """Glorot-uniform hidden layer; zero head so every frame starts at p = 0.5."""
        k = math.sqrt(6.0 / (d_raw + d_feat))
        return cls(rng.uniform(-k, k, (d_feat, d_raw)), np.zeros(d_feat), np.zeros((1, d_feat)), np.zeros(1))

    def features(self, frames) -> np.ndarray:
        return np.tanh(affine(frames, self.hidden_w, self.hidden_b))

    def probabilities(self, frames) -> np.ndarray:
        return sigmoid(affine(self.features(frames), self.head_w, self.head_b)[:, 0])


def extract_features(c: FrameClassifier, r: RawSequence) -> np.ndarray:
    if r.frames.shape[1] != c.d_raw:
        raise ShapeError(f"{r.id}: raw dimension {r.frames.shape[1]} != classifier input {c.d_raw}")
    return c.features(r.frames)


def frame_loss(c: FrameClassifier, sequences: Sequence[RawSequence], labels: Sequence[int]) -> float:
    """Frame-level cross-entropy with each sequence's label copied to all its frames (summed)."""
    total = 0.0
    for r, y in zip(sequences, labels):
        z = affine(c.features(r.frames), c.head_w, c.head_b)[:, 0]
        # -log sigmoid(z) = logaddexp(0, -z)
        total += float(np.sum(np.logaddexp(0.0, -z) if y == 1 else np.logaddexp(0.0, z)))
    return total


def _record_frame_loss(tape: Tape, c: FrameClassifier, X: np.ndarray, y: np.ndarray):
    nodes = {name: tape.param(name, value) for name, value in c.tensors().items()}
    h = tape.tanh(tape.affine(tape.const(X), nodes["hidden_w"], nodes["hidden_b"]))
    p = tape.clip(tape.sigmoid(tape.column(tape.affine(h, nodes["head_w"], nodes["head_b"]))), 1e-12, 1 - 1e-12)
    pos = tape.mul(tape.const(y), tape.log(p))
    neg = tape.mul(tape.const(1.0 - y), tape.log(tape.shift(tape.scale(p, -1.0), 1.0)))
    return tape.scale(tape.sum(tape.add(pos, neg)), -1.0)


def frame_loss_grads(c: FrameClassifier, X: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    loss = _record_frame_loss(tape, c, X, y)
    return float(loss.value), tape.backward(loss)


@dataclass
class ClassifierConfig:
    d_feat: int = 16
    epochs: int = 20
    lr: float = 1.0
    milestones: tuple[int, ...] = (3, 5)
    gamma: float = 0.1
    batch_size: int = 64
    seed: int = 0

    def learning_rate(self, epoch: int) -> float:
        """Rate for 0-based ``epoch``; divided by 1/gamma at each 1-based milestone epoch."""
        drops = sum(1 for m in self.milestones if epoch + 1 >= m)
        return self.lr * self.gamma ** drops


@dataclass
class ClassifierHistory:
    mean_loss: list[float] = field(default_factory=list)


def train_frame_classifier(sequences: Sequence[RawSequence], labels: Sequence[int],
                           config: ClassifierConfig) -> tuple[FrameClassifier, ClassifierHistory]:
    """Mini-batch SGD on frame-level cross-entropy of propagated sequence labels.

    Updates use the mean loss over a batch of frames; the logged per-epoch
    value is the mean per-frame loss.
    """
    if len(sequences) != len(labels) or not sequences:
        raise ConfigError("need one label per sequence and at least one sequence")
    if set(labels) != {0, 1}:
        raise ConfigError("frame classifier needs both complete and incomplete sequences")
    d_raw = {r.frames.shape[1] for r in sequences}
    if len(d_raw) != 1:
        raise ShapeError(f"raw sequences disagree on dimension: {sorted(d_raw)}")
    X = np.vstack([r.frames for r in sequences])
    y = np.concatenate([np.full(r.frames.shape[0], float(lab)) for r, lab in zip(sequences, labels)])

    init_seed, order_seed = np.random.SeedSequence(config.seed).spawn(2)
    c = FrameClassifier.initialize(d_raw.pop(), config.d_feat, np.random.default_rng(init_seed))
    order_rng = np.random.default_rng(order_seed)
    history = ClassifierHistory()
    for epoch in range(config.epochs):
        lr = config.learning_rate(epoch)
        idx = order_rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), config.batch_size):
            batch = idx[start:start + config.batch_size]
            loss, grads = frame_loss_grads(c, X[batch], y[batch])
            total += loss
            scale = lr / len(batch)
            for name in FrameClassifier.TENSORS:
                getattr(c, name)[...] -= scale * grads[name]
        history.mean_loss.append(total / len(y))
        log.info("frame classifier epoch %d lr=%g mean frame loss=%.5f", epoch + 1, lr, history.mean_loss[-1])
    return c, history
