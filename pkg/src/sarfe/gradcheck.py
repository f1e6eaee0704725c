"""Central finite-difference checking of the reverse-mode gradients.

Every differentiable layer gets a randomized check, plus an end-to-end
check through set abstraction and the attention stack. Trials that land
within 1e-3 of a ReLU kink or a maxpool tie are redrawn, since central
differences are meaningless across those points.

Relative error uses a floored denominator, err = |a - n| / max(|a|, |n|,
1e-3), so near-zero gradient entries are effectively compared absolutely
(finite-difference noise sits around 1e-10 for these losses).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import attention, numcore, roipool
from .cloudgeom import PointCloud
from .numcore import Parameter, Tape, TokenMatrix, backward

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
KINK_MARGIN = 1e-3


def kink_margin(tape: Tape) -> float:
    """Smallest |pre-activation| at any ReLU and smallest top-2 maxpool gap."""
    worst = math.inf
    for rec in tape.records:
        x = rec.saved.get("input")
        if x is None or x.size == 0:
            continue
        if rec.op == "relu":
            worst = min(worst, float(np.abs(x).min()))
        elif rec.op == "maxpool_set" and x.shape[0] >= 2:
            top2 = np.partition(x, x.shape[0] - 2, axis=0)
            worst = min(worst, float((top2[-1] - top2[-2]).min()))
    return worst


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)


@dataclass
class CheckReport:
    name: str
    max_rel_err: float
    entries: int

    @property
    def summary(self) -> str:
        return f"{self.name}: max rel err {self.max_rel_err:.3e} over {self.entries} entries"


def check_gradients(
    forward: Callable[[], TokenMatrix],
    targets: list[tuple[str, Parameter | TokenMatrix]],
    *,
    step: float = DEFAULT_STEP,
    entry_cap: int | None = None,
    rng: np.random.Generator | None = None,
    corrupt: bool = False,
) -> tuple[float, int]:
    """Compare reverse-mode gradients of a scalar loss against central FD.

    forward() must rebuild the loss from the current values of the targets;
    it runs once under a tape for the analytic pass and many times outside
    any tape for the perturbed evaluations. Returns (max rel err, entries).
    """
    for _, t in targets:
        if isinstance(t, Parameter):
            t.zero_grad()
        else:
            t.grad = None
    with Tape() as tape:
        loss = forward()
    backward(loss, tape)

    analytic: list[np.ndarray] = []
    arrays: list[np.ndarray] = []
    for _, t in targets:
        if isinstance(t, Parameter):
            analytic.append(t.grad.copy())
            arrays.append(t.values)
        else:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            analytic.append(g.copy())
            arrays.append(t.data)
    if corrupt:
        analytic[0] = analytic[0] + 0.01 * (1.0 + np.abs(analytic[0]))

    entries = [(ti, flat) for ti, arr in enumerate(arrays) for flat in range(arr.size)]
    if entry_cap is not None and len(entries) > entry_cap:
        if rng is None:
            rng = np.random.default_rng(0)
        chosen = rng.choice(len(entries), size=entry_cap, replace=False)
        entries = [entries[int(c)] for c in chosen]

    worst = 0.0
    for ti, flat in entries:
        arr = arrays[ti]
        original = arr.flat[flat]
        arr.flat[flat] = original + step
        f_plus = forward().data[0, 0]
        arr.flat[flat] = original - step
        f_minus = forward().data[0, 0]
        arr.flat[flat] = original
        numeric = (f_plus - f_minus) / (2.0 * step)
        worst = max(worst, relative_error(analytic[ti].flat[flat], numeric))
    return worst, len(entries)


def _away_from_zero(rng: np.random.Generator, shape, low=0.5, high=1.5) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, high, size=shape)


# --- check builders: each returns (forward, targets) -----------------------


def _build_matmul(rng):
    a = TokenMatrix(rng.normal(size=(5, 4)), requires_grad=True)
    b = TokenMatrix(rng.normal(size=(4, 3)), requires_grad=True)
    r = rng.normal(size=(5, 3))
    return lambda: numcore.weighted_sum(numcore.matmul(a, b), r), [("a", a), ("b", b)]


def _build_linear(rng):
    x = TokenMatrix(rng.normal(size=(8, 4)), requires_grad=True)
    w, b = numcore.init_linear_params(rng, 4, 3)
    r = rng.normal(size=(8, 3))
    return (
        lambda: numcore.weighted_sum(numcore.linear(x, w, b), r),
        [("x", x), ("w", w), ("b", b)],
    )


def _build_relu(rng):
    x = TokenMatrix(_away_from_zero(rng, (6, 5)), requires_grad=True)
    r = rng.normal(size=(6, 5))
    return lambda: numcore.weighted_sum(numcore.relu(x), r), [("x", x)]


def _build_feature_norm(rng):
    x = TokenMatrix(rng.normal(size=(7, 4), scale=2.0), requires_grad=True)
    gamma = Parameter(rng.uniform(0.5, 1.5, size=4))
    beta = Parameter(rng.normal(size=4))
    r = rng.normal(size=(7, 4))
    return (
        lambda: numcore.weighted_sum(numcore.feature_norm(x, gamma, beta), r),
        [("x", x), ("gamma", gamma), ("beta", beta)],
    )


def _build_softmax(rng):
    x = TokenMatrix(rng.normal(size=(5, 6)), requires_grad=True)
    r = rng.normal(size=(5, 6))
    return lambda: numcore.weighted_sum(numcore.softmax_rows(x), r), [("x", x)]


def _build_maxpool(rng):
    x = TokenMatrix(rng.normal(size=(6, 4), scale=3.0), requires_grad=True)
    r = rng.normal(size=(1, 4))
    return lambda: numcore.weighted_sum(numcore.maxpool_set(x), r), [("x", x)]


def _build_self_attention(rng):
    x = TokenMatrix(rng.normal(size=(5, 4)), requires_grad=True)
    p = attention.init_oa_block(rng, 4)
    r = rng.normal(size=(5, 4))
    targets = [
        ("x", x),
        ("wq", p.wq), ("bq", p.bq),
        ("wk", p.wk), ("bk", p.bk),
        ("wv", p.wv), ("bv", p.bv),
    ]
    return lambda: numcore.weighted_sum(attention.self_attention(x, p), r), targets


def _build_offset_attention(rng):
    x = TokenMatrix(rng.normal(size=(6, 4)), requires_grad=True)
    p = attention.init_oa_block(rng, 4)
    r = rng.normal(size=(6, 4))
    targets = [("x", x)] + list(p.named("oa").items())
    return lambda: numcore.weighted_sum(attention.offset_attention(x, p), r), targets


def _build_augmentator(rng):
    x = TokenMatrix(rng.normal(size=(6, 4)), requires_grad=True)
    p = attention.init_augmentator(rng, width=4, depth=2)
    r = rng.normal(size=(6, 4))
    targets = [("x", x)] + list(p.named("aug").items())
    return lambda: numcore.weighted_sum(attention.augmentator(x, p), r), targets


def _build_pipeline(rng):
    """set_abstraction into the attention stack, gradients w.r.t. all parameters.

    Neighbor gathering depends only on geometry, never on the perturbed
    parameters, so it runs once and the finite-difference forwards reuse it.
    """
    box = roipool.Box3D(
        center=tuple(rng.uniform(-0.3, 0.3, size=3)),
        size=(2.0, 2.4, 1.8),
        yaw=float(rng.uniform(-math.pi, math.pi * 0.999)),
    )
    source = PointCloud(
        rng.uniform(-1.6, 1.6, size=(30, 3)), rng.normal(size=(30, 2))
    )
    grid = roipool.generate_grid_points(box, 2)
    neighborhoods = roipool.gather_neighborhoods(grid, source, 1.3, max_neighbors=8)
    mlp = roipool.init_set_abstraction_mlp(rng, in_width=5, hidden_width=4, out_width=4)
    aug = attention.init_augmentator(rng, width=4, depth=2)
    r = rng.normal(size=(8, 4))
    targets = list(mlp.named("sa").items()) + list(aug.named("aug").items())

    def forward():
        pooled = roipool.encode_neighborhoods(neighborhoods, mlp)
        return numcore.weighted_sum(attention.augmentator(pooled, aug), r)

    return forward, targets


CHECKS: list[tuple[str, Callable, int | None]] = [
    ("matmul", _build_matmul, None),
    ("linear", _build_linear, None),
    ("relu", _build_relu, None),
    ("feature_norm", _build_feature_norm, None),
    ("softmax_rows", _build_softmax, None),
    ("maxpool_set", _build_maxpool, None),
    ("self_attention", _build_self_attention, None),
    ("offset_attention", _build_offset_attention, 64),
    ("augmentator", _build_augmentator, 64),
    ("set_abstraction+augmentator", _build_pipeline, 48),
]


def run_check(
    name: str,
    build: Callable,
    rng: np.random.Generator,
    *,
    step: float = DEFAULT_STEP,
    entry_cap: int | None = None,
    corrupt: bool = False,
    max_redraws: int = 25,
) -> CheckReport:
    """Build a random instance (redrawing near kinks) and run the FD check."""
    for _ in range(max_redraws):
        forward, targets = build(rng)
        with Tape() as probe:
            forward()
        if kink_margin(probe) > KINK_MARGIN:
            break
    err, entries = check_gradients(
        forward, targets, step=step, entry_cap=entry_cap, rng=rng, corrupt=corrupt
    )
    return CheckReport(name=name, max_rel_err=err, entries=entries)


@dataclass
class SuiteResult:
    trials: int
    tol: float
    worst: CheckReport = field(default_factory=lambda: CheckReport("none", 0.0, 0))
    trials_passed: int = 0

    @property
    def passed(self) -> bool:
        return self.trials_passed == self.trials

    @property
    def summary(self) -> str:
        status = "passed" if self.passed else "FAILED"
        return (
            f"gradcheck {status}: {self.trials_passed}/{self.trials} trials, "
            f"worst {self.worst.summary} (tol {self.tol:g})"
        )


def run_suite(
    trials: int = 100,
    tol: float = DEFAULT_TOL,
    *,
    step: float = DEFAULT_STEP,
    seed: int = 0,
    corrupt: bool = False,
) -> SuiteResult:
    """Run every layer check plus the end-to-end check for each trial."""
    result = SuiteResult(trials=trials, tol=tol)
    for trial in range(trials):
        rng = np.random.default_rng(seed + trial)
        trial_ok = True
        for name, build, cap in CHECKS:
            report = run_check(
                name, build, rng, step=step, entry_cap=cap, corrupt=corrupt
            )
            if report.max_rel_err > result.worst.max_rel_err:
                result.worst = report
            if report.max_rel_err > tol:
                trial_ok = False
        if trial_ok:
            result.trials_passed += 1
    return result
