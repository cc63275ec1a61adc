"""Finite-precision safety bounds for the linear recurrence, plus a runtime
overflow monitor for training.

All norms here are max-style: the hidden-state bound uses the sup norm on
states and inputs and the induced inf->inf operator norm (maximum absolute
row sum) for the input map. That combination makes the geometric-series
estimate on |h_T| valid coordinatewise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DivergentBound(ArithmeticError):
    """The asymptotic hidden-state bound does not exist (decay >= 1)."""


@dataclass
class StabilityBudget:
    """Quantities entering the hidden-state magnitude estimate.

    M: largest representable magnitude of the active precision mode.
    lam: largest diagonal decay mode.
    u_norm1: max absolute row sum of the input map.
    x_sup: sup over steps of the input max-norm.
    h0_inf: max-norm of the initial hidden state.
    """

    M: float
    lam: float
    u_norm1: float
    x_sup: float
    h0_inf: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("decay must be non-negative")
        if self.M <= self.h0_inf:
            raise ValueError("budget requires M > |h0|_inf")


def operator_norm_inf(U: np.ndarray) -> float:
    """Induced inf->inf norm: maximum absolute row sum."""
    U = np.atleast_2d(np.asarray(U))
    return float(np.abs(U).sum(axis=1).max())


def hidden_bound(budget: StabilityBudget, T) -> float:
    """Upper bound on |h_T|_inf after T steps (T may be math.inf)."""
    lam = budget.lam
    drive = budget.u_norm1 * budget.x_sup
    if T is math.inf or T == float("inf"):
        if lam >= 1.0:
            if drive == 0.0:
                return budget.h0_inf
            raise DivergentBound("decay >= 1: the infinite-horizon bound diverges")
        return budget.h0_inf + drive / (1.0 - lam)
    if T < 0:
        raise ValueError("horizon must be non-negative")
    if lam == 1.0:
        geom = float(T)
    else:
        geom = (1.0 - lam**T) / (1.0 - lam)
    return budget.h0_inf + geom * drive


@dataclass
class SafeDecayResult:
    lambda_star: float
    no_safe_decay: bool


def max_safe_decay(budget: StabilityBudget) -> SafeDecayResult:
    """Largest decay for which the infinite-horizon bound stays within M.

    lambda* = 1 - |U|_1 sup|x| / (M - |h0|_inf), clamped to [0, 1). Any decay
    strictly below lambda* keeps hidden_bound(inf) <= M; this is sufficient,
    not necessary.
    """
    headroom = budget.M - budget.h0_inf
    lam_star = 1.0 - budget.u_norm1 * budget.x_sup / headroom
    if lam_star <= 0.0:
        return SafeDecayResult(0.0, True)
    return SafeDecayResult(min(lam_star, 1.0 - 1e-16), False)


def simulate_worst_case(budget: StabilityBudget, T: int) -> float:
    """|h_T| under sign-aligned adversarial inputs at the budget's extremes.

    Every step receives the full drive |U|_1 * sup|x| with matching sign, so
    the trajectory realizes the geometric sum exactly (initial state set to
    zero; a nonzero h0 only decays and cannot exceed its budget term).
    """
    h = 0.0
    drive = budget.u_norm1 * budget.x_sup
    for _ in range(T):
        h = budget.lam * h + drive
    return h + budget.lam**T * budget.h0_inf


def simulate_rollout(lam_diag: np.ndarray, U: np.ndarray, xs: np.ndarray,
                     h0: np.ndarray | None = None) -> float:
    """Max |h_k|_inf over an actual recurrence rollout (numpy, no autodiff)."""
    m = lam_diag.shape[0]
    h = np.zeros(m) if h0 is None else h0.astype(float).copy()
    peak = float(np.abs(h).max()) if h.size else 0.0
    for x in xs:
        h = lam_diag * h + U @ x
        peak = max(peak, float(np.abs(h).max()))
    return peak


@dataclass
class OverflowEvent:
    step: int
    layer: int
    max_abs_h: float
    lambda_max: float
    kind: str = "magnitude"  # magnitude | nonfinite

    def to_record(self) -> dict:
        return {
            "event": "overflow",
            "kind": self.kind,
            "step": self.step,
            "layer": self.layer,
            "max_abs_h": self.max_abs_h,
            "lambda_max": self.lambda_max,
        }


@dataclass
class OverflowMonitor:
    """Watches per-layer hidden-state magnitudes published between steps.

    Emits an event when a layer's max |h| crosses ``threshold_frac * M`` or
    stops being finite. M defaults to the precision mode's float max; the
    stress tests pass it explicitly.
    """

    M: float
    threshold_frac: float = 0.9
    events: list[OverflowEvent] = field(default_factory=list)

    def observe(self, step: int, layer: int, max_abs_h: float,
                lambda_max: float) -> OverflowEvent | None:
        event = None
        if not math.isfinite(max_abs_h):
            event = OverflowEvent(step, layer, max_abs_h, lambda_max, kind="nonfinite")
        elif max_abs_h > self.threshold_frac * self.M:
            event = OverflowEvent(step, layer, max_abs_h, lambda_max)
        if event is not None:
            self.events.append(event)
        return event

    @property
    def fired(self) -> bool:
        return bool(self.events)
