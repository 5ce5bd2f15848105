"""Finite-difference verification of every analytic gradient in the package.

Each case draws a small random instance, computes exact gradients through the
tape and compares them with central differences taken through an
independent extended-precision forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .features import FrameClassifier, frame_loss_grads
from .model import LITERAL, LOG, SUPERVISED, WEAK, ModelParams, ReferenceObjective, loss_and_grads
from .numerics import (
    EXTENDED,
    CellParams,
    GradReport,
    _sequence_forward,
    compare_gradients,
    finite_difference_gradient,
    reference_sequence_forward,
    sequence_backward,
)

EPS = 1e-5
T_CHECK, D_CHECK, H_CHECK = 8, 5, 8


@dataclass
class Case:
    label: str
    run: Callable[[np.random.Generator], tuple[dict, dict]]


def _model_case(kind: str, variant: str, uniform_attention: bool = False):
    def run(rng):
        p = ModelParams.initialize(D_CHECK, H_CHECK, T_CHECK, rng, WEAK, variant)
        # give the attention projection some weight so both networks matter
        p.tensors["attention.proj_w"][...] = rng.uniform(-0.5, 0.5, p.tensors["attention.proj_w"].shape)
        X = rng.standard_normal((T_CHECK, D_CHECK))
        target = int(rng.integers(0, 2)) if kind == WEAK else int(rng.integers(1, T_CHECK + 1))
        _, analytic = loss_and_grads(p, X, target, kind, variant, uniform_attention)
        objective = ReferenceObjective(X, target, kind, variant, EXTENDED, uniform_attention)
        numeric = finite_difference_gradient(objective, p.tensors, EPS, EXTENDED)
        return analytic, numeric
    return run


def _sequence_case(rng):
    p = CellParams.initialize(D_CHECK, H_CHECK, rng)
    X = rng.standard_normal((T_CHECK, D_CHECK))
    G = rng.standard_normal((T_CHECK, H_CHECK))
    dX, grads = sequence_backward(_sequence_forward(X, p), p, G)
    analytic = {"X": dX, "input_weights": grads.input_weights,
                "recurrent_weights": grads.recurrent_weights, "biases": grads.biases}
    point = {"X": X, "input_weights": p.input_weights, "recurrent_weights": p.recurrent_weights,
             "biases": p.biases}

    def f(t):
        H = reference_sequence_forward(t["X"], t["input_weights"], t["recurrent_weights"], t["biases"])
        return np.sum(G.astype(EXTENDED) * H)

    return analytic, finite_difference_gradient(f, point, EPS, EXTENDED)


def _classifier_case(rng):
    c = FrameClassifier.initialize(D_CHECK, 6, rng)
    c.head_w[...] = rng.uniform(-1, 1, c.head_w.shape)
    c.head_b[...] = rng.uniform(-0.5, 0.5, 1)
    X = rng.standard_normal((12, D_CHECK))
    y = rng.integers(0, 2, 12).astype(np.float64)
    _, analytic = frame_loss_grads(c, X, y)
    Xe, ye = X.astype(EXTENDED), y.astype(EXTENDED)

    def f(t):
        h = np.tanh(Xe @ t["hidden_w"].T + t["hidden_b"])
        z = h @ t["head_w"][0] + t["head_b"][0]
        return np.sum(ye * np.logaddexp(0, -z) + (1 - ye) * np.logaddexp(0, z))

    return analytic, finite_difference_gradient(f, c.tensors(), EPS, EXTENDED)


CASES = (
    Case("weak/literal", _model_case(WEAK, LITERAL)),
    Case("weak/log", _model_case(WEAK, LOG)),
    Case("supervised", _model_case(SUPERVISED, LITERAL)),
    Case("supervised/uniform", _model_case(SUPERVISED, LITERAL, uniform_attention=True)),
    Case("lstm-sequence", _sequence_case),
    Case("frame-classifier", _classifier_case),
)
MODEL_CASES = ("weak/literal", "weak/log", "supervised")


def gradcheck(seed: int = 0, count: int = 20, tol: float = 1e-4, cases=None,
              corrupt: str | None = None) -> list[GradReport]:
    """One report per (case, seed), seeds ``seed .. seed + count - 1``.

    ``corrupt`` names a tensor whose analytic gradient is deliberately
    perturbed before comparison, to show the gate catches a wrong gradient.
    """
    chosen = [c for c in CASES if cases is None or c.label in cases]
    reports = []
    for k in range(count):
        children = np.random.SeedSequence([seed + k]).spawn(len(CASES))
        for case, child in zip(CASES, children):
            if case not in chosen:
                continue
            analytic, numeric = case.run(np.random.default_rng(child))
            if corrupt is not None and corrupt in analytic:
                analytic = dict(analytic)
                analytic[corrupt] = analytic[corrupt] * 1.01 + 1e-3
            reports.append(compare_gradients(analytic, numeric, EPS, tol, f"{case.label} seed={seed + k}"))
    return reports


def format_reports(reports: list[GradReport]) -> str:
    rows = [(r.label, name, err, "ok" if err < r.tol else "FAIL") for r in reports for name, err in r.errors.items()]
    width = max([len("check")] + [len(r[0]) for r in rows])
    nwidth = max([len("tensor")] + [len(r[1]) for r in rows])
    lines = [f"{'check':<{width}}  {'tensor':<{nwidth}}  {'max rel err':>12}  status"]
    lines += [f"{a:<{width}}  {b:<{nwidth}}  {c:>12.3e}  {d}" for a, b, c, d in rows]
    worst = max((r.max_error for r in reports), default=float("nan"))
    failed = sum(not r.passed for r in reports)
    lines.append(f"{len(reports)} checks, {failed} failed, worst relative error {worst:.3e}")
    return "\n".join(lines) + "\n"
