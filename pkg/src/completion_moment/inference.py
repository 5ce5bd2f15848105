"""Turn per-frame network outputs into a completion-moment prediction.

Frames are 1-based. A prediction's ``moment`` is the first post-completion
frame, or ``None`` when the sequence is judged incomplete.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import SUPERVISED, WEAK, ModelParams, raw_outputs
from .numerics import ShapeError, sigmoid, temporal_softmax

LEARNT, UNIFORM = "learnt", "uniform"
OS_FLOOR = -1.0 + 1e-6


@dataclass
class Prediction:
    moment: int | None
    objective: float
    objectives: np.ndarray | None = None

    @property
    def incomplete(self) -> bool:
        return self.moment is None

    def effective(self, T: int) -> int:
        """Moment with incompletion mapped to T + 1."""
        return T + 1 if self.moment is None else self.moment

    def __eq__(self, other):
        if not isinstance(other, Prediction):
            return NotImplemented
        same_vec = (self.objectives is None and other.objectives is None) or (
            self.objectives is not None and other.objectives is not None
            and np.array_equal(self.objectives, other.objectives)
        )
        return self.moment == other.moment and self.objective == other.objective and same_vec


def postprocess_attention(a) -> np.ndarray:
    """Min-max normalise, then zero everything below 0.5; constant input maps to zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    out = (a - lo) / (hi - lo)
    out[out < 0.5] = 0.0
    return out


def completion_scores(a_post, o_s) -> np.ndarray:
    a_post, o_s = np.asarray(a_post, dtype=np.float64), np.asarray(o_s, dtype=np.float64)
    if a_post.shape != o_s.shape or a_post.ndim != 1:
        raise ShapeError(f"attention {a_post.shape} and scores {o_s.shape} must be equal-length vectors")
    return sigmoid(a_post * o_s)


def _check_scores(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ShapeError(f"need a non-empty score vector, got shape {s.shape}")
    return s


def _dyadic(s: np.ndarray) -> tuple[list[int], int]:
    """Scores as integers over a common power-of-two denominator (exact for doubles)."""
    ratios = [float(v).as_integer_ratio() for v in s]
    k = max(d.bit_length() - 1 for _, d in ratios)
    return [n << (k - (d.bit_length() - 1)) for n, d in ratios], 1 << k


def _from_objectives(exact: list[int], one: int) -> Prediction:
    T = len(exact) - 1
    best = max(exact)
    j = max(i for i, v in enumerate(exact) if v == best)  # ties go to the latest split
    obj = np.array([v / one for v in exact])
    return Prediction(None if j == T else j + 1, float(obj[j]), obj)


def split_objectives_exact(s) -> tuple[list[int], int]:
    """Objective for every split j = 0..T via prefix sums, in exact arithmetic.

    Returns integer numerators and their common denominator. objective(0) is
    the total completion evidence; each further split trades frame j's
    completion evidence s_j for its incompletion evidence 1 - s_j.
    """
    s = _check_scores(s)
    if np.any((s < 0) | (s > 1)):
        raise ValueError("scores must lie in [0, 1]")
    nums, one = _dyadic(s)
    obj = [sum(nums)]
    for n in nums:
        obj.append(obj[-1] + one - 2 * n)
    return obj, one


def split_objectives(s) -> np.ndarray:
    exact, one = split_objectives_exact(s)
    return np.array([v / one for v in exact])


def detect_completion_weak(s) -> Prediction:
    return _from_objectives(*split_objectives_exact(s))


def detect_completion_weak_oracle(s) -> Prediction:
    """Direct evaluation of every split, for cross-checking the prefix-sum path."""
    s = _check_scores(s)
    nums, one = _dyadic(s)
    T = len(nums)
    obj = []
    for j in range(T + 1):
        total = 0
        for t in range(T):
            total += (one - nums[t]) if t < j else nums[t]
        obj.append(total)
    return _from_objectives(obj, one)


def supervised_estimate(a, o_s) -> float:
    """Attention-weighted average of per-frame completion estimates t / (o_s + 1)."""
    a, o_s = np.asarray(a, dtype=np.float64), np.asarray(o_s, dtype=np.float64)
    if a.shape != o_s.shape or a.ndim != 1 or a.size == 0:
        raise ShapeError(f"attention {a.shape} and scores {o_s.shape} must be equal-length vectors")
    t = np.arange(1, a.size + 1, dtype=np.float64)
    return float(np.sum(a * t / (np.maximum(o_s, OS_FLOOR) + 1.0)))


def detect_completion_supervised(a, o_s) -> Prediction:
    est = supervised_estimate(a, o_s)
    T = len(a)
    moment = int(min(max(np.floor(est + 0.5), 1), T))
    return Prediction(moment, est)


@dataclass
class InferenceTrace:
    o_a: np.ndarray
    o_s: np.ndarray
    a: np.ndarray
    a_post: np.ndarray
    s: np.ndarray

    def rows(self):
        for t in range(self.o_a.size):
            yield t + 1, self.o_a[t], self.o_s[t], self.a[t], self.a_post[t], self.s[t]


def predict(p: ModelParams, X, attention: str = LEARNT, mode: str | None = None) -> tuple[Prediction, InferenceTrace]:
    """Run both networks on one resampled sequence and detect its completion moment.

    Weak mode feeds post-processed attention into the split detector; uniform
    attention uses a_t = 1/T directly with no post-processing. Supervised mode
    always uses the raw (or uniform) attention, which sums to one.
    """
    mode = mode or p.mode
    o_a, o_s = raw_outputs(p, X)
    T = o_a.size
    if attention == LEARNT:
        a = temporal_softmax(o_a)
    elif attention == UNIFORM:
        a = np.full(T, 1.0 / T)
    else:
        raise ValueError(f"attention must be {LEARNT!r} or {UNIFORM!r}")
    if mode == WEAK:
        a_post = postprocess_attention(a) if attention == LEARNT else a
        s = completion_scores(a_post, o_s)
        pred = detect_completion_weak(s)
    elif mode == SUPERVISED:
        a_post = a
        s = a * np.arange(1, T + 1) / (np.maximum(o_s, OS_FLOOR) + 1.0)
        pred = detect_completion_supervised(a, o_s)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return pred, InferenceTrace(o_a, o_s, a, a_post, s)


TRACE_COLUMNS = ("t", "o_a", "o_s", "a", "a_post", "s")


def write_trace_csv(trace: InferenceTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace.rows():
            w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def read_trace_csv(path) -> InferenceTrace:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(TRACE_COLUMNS)}")
        rows = list(reader)
    cols = {c: np.array([float(r[c]) for r in rows]) for c in TRACE_COLUMNS[1:]}
    return InferenceTrace(**cols)


def detect_from_trace_file(path: str | Path) -> Prediction:
    """Weak detection from a trace CSV, using its a_post and o_s columns."""
    tr = read_trace_csv(path)
    return detect_completion_weak(completion_scores(tr.a_post, tr.o_s))
