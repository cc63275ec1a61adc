"""Exponential-sum fits to memory kernels on a finite window, and the
extrapolation error those fits incur beyond it.

A linear functional y_t = integral of rho(s) x(t-s) ds is matched by a
diagonal state-space layer exactly when its kernel sum(c_i exp(-lam_i s))
matches rho. Fitting on s in [0, T] and evaluating on [T, t] is, after the
substitution u = exp(-s), polynomial extrapolation of sum(c_i u^lam_i) from
u in [exp(-T), 1] down toward 0 -- which is why good in-window residuals say
nothing about behavior beyond the window.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .ndcore import Tape, Tensor


TAIL_EPS = 1e-12


@dataclass(frozen=True)
class MemoryKernel:
    """Analytic target kernel with exact L1 data for tail truncation."""

    family: str          # exp_sum | power_law | shifted_gaussian
    params: tuple
    l1_bound: float

    def rho(self, s):
        s = np.asarray(s, dtype=np.float64)
        if self.family == "exp_sum":
            coeffs, rates = self.params
            return sum(a * np.exp(-b * s) for a, b in zip(coeffs, rates))
        if self.family == "power_law":
            (alpha,) = self.params
            return (1.0 + s) ** (-alpha)
        if self.family == "shifted_gaussian":
            center, width, amp = self.params
            return amp * np.exp(-((s - center) ** 2) / (2.0 * width**2))
        raise ValueError(f"unknown kernel family {self.family!r}")

    def tail_l1(self, t: float) -> float:
        """Exact integral of |rho| over [t, infinity)."""
        if self.family == "exp_sum":
            coeffs, rates = self.params
            return float(sum(abs(a) / b * math.exp(-b * t) for a, b in zip(coeffs, rates)))
        if self.family == "power_law":
            (alpha,) = self.params
            return float((1.0 + t) ** (1.0 - alpha) / (alpha - 1.0))
        if self.family == "shifted_gaussian":
            center, width, amp = self.params
            z = (t - center) / (width * math.sqrt(2.0))
            return float(abs(amp) * width * math.sqrt(math.pi / 2.0) * math.erfc(z))
        raise ValueError(self.family)

    def truncation_point(self, eps: float = TAIL_EPS) -> float:
        """Smallest horizon where the remaining kernel mass is below eps."""
        if self.family == "exp_sum":
            coeffs, rates = self.params
            bmin = min(rates)
            mass = sum(abs(a) / b for a, b in zip(coeffs, rates))
            return max(0.0, math.log(max(mass, eps) / eps) / bmin)
        if self.family == "power_law":
            (alpha,) = self.params
            return (eps * (alpha - 1.0)) ** (1.0 / (1.0 - alpha)) - 1.0
        if self.family == "shifted_gaussian":
            center, width, amp = self.params
            hi = center + width
            while self.tail_l1(hi) > eps:
                hi += width
            return hi
        raise ValueError(self.family)


def exp_sum_kernel(coeffs, rates) -> MemoryKernel:
    coeffs = tuple(float(c) for c in coeffs)
    rates = tuple(float(r) for r in rates)
    if any(r <= 0 for r in rates):
        raise ValueError("exp_sum rates must be positive for integrability")
    l1 = sum(abs(c) / r for c, r in zip(coeffs, rates))
    return MemoryKernel("exp_sum", (coeffs, rates), l1)


def power_law_kernel(alpha: float) -> MemoryKernel:
    if alpha <= 1.0:
        raise ValueError("power-law kernels need alpha > 1 for finite L1 mass")
    return MemoryKernel("power_law", (float(alpha),), 1.0 / (alpha - 1.0))


def shifted_gaussian_kernel(center: float, width: float, amp: float = 1.0) -> MemoryKernel:
    if width <= 0:
        raise ValueError("width must be positive")
    z = -center / (width * math.sqrt(2.0))
    l1 = abs(amp) * width * math.sqrt(math.pi / 2.0) * math.erfc(z)
    return MemoryKernel("shifted_gaussian", (float(center), float(width), float(amp)), l1)


SHIPPED_TARGETS = {
    "exp1": lambda: exp_sum_kernel([1.0], [1.0]),
    "exp_mix": lambda: exp_sum_kernel([0.6, 0.4], [0.5, 3.0]),
    "power_law:2": lambda: power_law_kernel(2.0),
    "power_law:1.5": lambda: power_law_kernel(1.5),
    "gauss": lambda: shifted_gaussian_kernel(2.0, 0.7),
}


def kernel_by_name(name: str) -> MemoryKernel:
    if name in SHIPPED_TARGETS:
        return SHIPPED_TARGETS[name]()
    if name.startswith("power_law:"):
        return power_law_kernel(float(name.split(":", 1)[1]))
    raise ValueError(f"unknown kernel target {name!r}")


# ---------------------------------------------------------------------------
# fitting

@dataclass
class FittedKernel:
    """Model-side kernel sum(c_i exp(-lam_i s)) fitted on [0, fit_T]."""

    coeffs: np.ndarray
    rates: np.ndarray
    fit_T: float
    residual_rms: float
    ridge: float = 0.0

    def rho(self, s):
        s = np.asarray(s, dtype=np.float64)
        out = np.exp(-np.outer(np.atleast_1d(s), self.rates)) @ self.coeffs
        return float(out[0]) if s.ndim == 0 else out

    def poly(self, u):
        """Same kernel under u = exp(-s): a polynomial with exponents lam_i."""
        u = np.asarray(u, dtype=np.float64)
        return (np.atleast_1d(u)[:, None] ** self.rates) @ self.coeffs

    def tail_l1_bound(self, t: float) -> float:
        return float(np.sum(np.abs(self.coeffs) / self.rates * np.exp(-self.rates * t)))

    @property
    def m(self) -> int:
        return len(self.coeffs)


def default_rates(m: int, T: float) -> np.ndarray:
    """Log-spaced decay rates covering slow (1/T) to fast (10) modes."""
    if m == 1:
        return np.array([1.0 / T])
    return np.geomspace(1.0 / T, 10.0, m)


def fit_kernel(target: MemoryKernel, m: int, T: float, grid_n: int,
               method: str = "linear", rates: np.ndarray | None = None,
               joint_steps: int = 2000, joint_lr: float = 0.02) -> FittedKernel:
    """Least-squares fit of an m-term exponential sum to ``target`` on [0, T].

    Default: rates fixed log-spaced, coefficients from the normal equations
    (singular systems fall back to a logged ridge solve). ``method='joint'``
    additionally optimizes the rates by gradient descent, which exhibits the
    ill-conditioning of fitting exponents directly.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if T <= 0:
        raise ValueError("T must be positive")
    if grid_n < 10 * m:
        raise ValueError(f"grid_n must be at least 10*m = {10 * m}")
    lam = default_rates(m, T) if rates is None else np.asarray(rates, dtype=np.float64)
    s = np.linspace(0.0, T, grid_n)
    y = target.rho(s)
    A = np.exp(-np.outer(s, lam))
    ridge = 0.0
    G = A.T @ A
    try:
        c = np.linalg.solve(G, A.T @ y)
    except np.linalg.LinAlgError:
        ridge = 1e-12
        c = np.linalg.solve(G + ridge * np.eye(m), A.T @ y)
    if method == "joint":
        c, lam = _joint_fit(s, y, c, lam, joint_steps, joint_lr)
    elif method != "linear":
        raise ValueError(f"unknown fit method {method!r}")
    resid = float(np.sqrt(np.mean((np.exp(-np.outer(s, lam)) @ c - y) ** 2)))
    return FittedKernel(np.asarray(c), np.asarray(lam), float(T), resid, ridge)


def _joint_fit(s, y, c0, lam0, steps, lr):
    """Adam on (coefficients, log rates); run on the package's own autodiff."""
    c = Tensor(c0.copy(), requires_grad=True)
    log_lam = Tensor(np.log(lam0), requires_grad=True)
    sT = Tensor(s[:, None])
    yT = Tensor(y)
    mom = {id(c): 0.0, id(log_lam): 0.0}
    vel = {id(c): 0.0, id(log_lam): 0.0}
    for t in range(1, steps + 1):
        c.grad = None
        log_lam.grad = None
        with Tape() as tape:
            pred = (nd.exp(-sT * nd.exp(log_lam))) @ c
            loss = ((pred - yT) ** 2).mean()
        tape.backward(loss)
        for p in (c, log_lam):
            g = p.grad
            mom[id(p)] = 0.9 * mom[id(p)] + 0.1 * g
            vel[id(p)] = 0.999 * vel[id(p)] + 0.001 * g * g
            mhat = mom[id(p)] / (1 - 0.9**t)
            vhat = vel[id(p)] / (1 - 0.999**t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + 1e-8)
    return c.data.copy(), np.exp(log_lam.data.copy())


# ---------------------------------------------------------------------------
# quadrature

def simpson(f, a: float, b: float, panels: int) -> float:
    """Composite Simpson rule with ``panels`` subintervals (rounded up to even)."""
    if panels < 2:
        raise ValueError("quadrature needs at least 2 panels")
    n = panels + (panels % 2)
    x = np.linspace(a, b, n + 1)
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return float((b - a) / n / 3.0 * np.sum(w * f(x)))


def simpson_geometric(f, a: float, b: float, panels_per_seg: int) -> float:
    """Simpson over octave-split segments; handles integrands spanning decades."""
    total = 0.0
    lo = a
    while lo < b:
        hi = min(lo * 2.0, b) if lo > 0 else b
        total += simpson(f, lo, hi, panels_per_seg)
        lo = hi
    return total


@dataclass
class ExtrapolationError:
    outside: float   # integral of |rho - rho_hat| over [T, t]
    inside: float    # same integrand over [0, T]
    t_effective: float
    truncated: bool = False


def extrapolation_error(fit: FittedKernel, target: MemoryKernel, T: float, t: float,
                        quad_n: int = 2048) -> ExtrapolationError:
    """Kernel mismatch mass beyond the fit window: integral over [T, t].

    ``t`` may be inf; the horizon is then truncated where both tails fall
    below TAIL_EPS, which bounds the discarded mass by 2*TAIL_EPS.
    """
    if t <= T:
        raise ValueError("extrapolation window requires t > T")
    if quad_n < 2:
        raise ValueError("quad_n must be >= 2")
    diff = lambda s: np.abs(target.rho(s) - fit.rho(s))
    truncated = False
    t_eff = t
    if math.isinf(t):
        truncated = True
        t_eff = max(target.truncation_point(TAIL_EPS), _fit_truncation(fit), T * 2.0)
    if t_eff / max(T, 1e-9) > 64.0:
        outside = simpson_geometric(diff, T, t_eff, max(quad_n // 8, 64))
    else:
        outside = simpson(diff, T, t_eff, quad_n)
    inside = simpson(diff, 0.0, T, quad_n)
    return ExtrapolationError(outside, inside, t_eff, truncated)


def _fit_truncation(fit: FittedKernel) -> float:
    mass = float(np.sum(np.abs(fit.coeffs) / fit.rates))
    if mass <= TAIL_EPS:
        return 0.0
    return float(math.log(mass / TAIL_EPS) / fit.rates.min())


# ---------------------------------------------------------------------------
# change of variables u = exp(-s)

@dataclass
class ChangeOfVariableView:
    u: np.ndarray
    transported_rho: np.ndarray   # rho(-log u)
    poly: np.ndarray              # sum c_i u^lam_i
    integrand: np.ndarray         # |transported - poly| / u


def change_of_variable_view(fit: FittedKernel, target: MemoryKernel,
                            s_max: float | None = None, n: int = 257) -> ChangeOfVariableView:
    """Sampled u-domain picture of the fit on a log-spaced u grid.

    The pointwise identity sum(c exp(-lam s)) = sum(c u^lam) holds by
    construction; the returned integrand integrates (in u) to the s-domain
    extrapolation error over the corresponding window.
    """
    hi = s_max if s_max is not None else 2.0 * fit.fit_T
    u = np.exp(-np.linspace(0.0, hi, n))  # u in [exp(-hi), 1]
    trho = target.rho(-np.log(u))
    poly = fit.poly(u)
    with np.errstate(divide="ignore"):
        integrand = np.abs(trho - poly) / u
    return ChangeOfVariableView(u, trho, poly, integrand)


def u_domain_error(fit: FittedKernel, target: MemoryKernel, T: float, t: float,
                   panels: int = 4096) -> float:
    """Integral of |T rho_u - poly(u)|/u du over [exp(-t), exp(-T)].

    Evaluated on a geometric u grid (Simpson in log u) with all quantities
    expressed in u; this is an independent quadrature of the same mass the
    s-domain path computes, in different arithmetic.
    """
    if t <= T:
        raise ValueError("u-domain window requires t > T")
    w_lo, w_hi = -t, -T  # w = log u
    n = panels + (panels % 2)
    w = np.linspace(w_lo, w_hi, n + 1)
    u = np.exp(w)
    vals = np.abs(target.rho(-np.log(u)) - fit.poly(u)) / u
    # du = u dw, so Simpson in w integrates vals * u
    weights = np.ones(n + 1)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    return float((w_hi - w_lo) / n / 3.0 * np.sum(weights * vals * u))


# ---------------------------------------------------------------------------
# inference-time error decomposition

@dataclass
class ErrorDecomposition:
    """|y_t - y_hat_t| <= extension + approx + optimization.

    extension_term: history older than the horizon vs the assumed offset,
        |integral_t^inf rho(s) x(t-s) ds - y_hat_0|.
    approx_term: kernel mismatch over [T, t], the part training never saw.
    optimization_term: kernel mismatch within the fitted window [0, T].
    """

    extension_term: float
    approx_term: float
    optimization_term: float
    lhs: float  # |y_t - y_hat_t| evaluated directly

    @property
    def total(self) -> float:
        return self.extension_term + self.approx_term + self.optimization_term

    def holds(self, slack: float = 1e-8) -> bool:
        return self.lhs <= self.total + slack


def decompose_error(target: MemoryKernel, fit: FittedKernel, x_signal,
                    T: float, t: float, y_hat_0: float = 0.0,
                    quad_n: int = 4096, x_bound: float | None = None) -> ErrorDecomposition:
    """Evaluate the three-term split of the prediction error at time t.

    ``x_signal`` maps time points (array) to bounded signal values; it is
    probed on (-inf, t] only through kernel-weighted integrals truncated at
    the kernels' TAIL_EPS horizons. Signals exceeding ``x_bound`` (default
    1e6) are rejected as unbounded.
    """
    bound = 1e6 if x_bound is None else x_bound
    horizon = target.truncation_point(TAIL_EPS)

    def probe(s):
        x = np.asarray(x_signal(t - np.asarray(s)))
        if np.any(np.abs(x) > bound):
            raise ValueError("input signal exceeds its declared bound")
        return x

    rho_x = lambda s: target.rho(s) * probe(s)
    diff_x = lambda s: (target.rho(s) - fit.rho(s)) * probe(s)

    tail = simpson_geometric(rho_x, t, horizon, max(quad_n // 8, 64)) if horizon > t else 0.0
    mid = simpson(diff_x, T, t, quad_n)
    head = simpson(diff_x, 0.0, T, quad_n)

    y_t = simpson(rho_x, 0.0, t, quad_n) + tail
    y_hat_t = simpson(lambda s: fit.rho(s) * probe(s), 0.0, t, quad_n) + y_hat_0

    return ErrorDecomposition(
        extension_term=abs(tail - y_hat_0),
        approx_term=abs(mid),
        optimization_term=abs(head),
        lhs=abs(y_t - y_hat_t),
    )


# ---------------------------------------------------------------------------
# reporting

def error_summary(target_name: str, target: MemoryKernel, ms, T: float, t: float,
                  grid_n: int = 400, quad_n: int = 2048) -> list[dict]:
    rows = []
    for m in ms:
        fit = fit_kernel(target, m, T, grid_n)
        err = extrapolation_error(fit, target, T, t, quad_n)
        held = extrapolation_error(fit, target, T, 2 * T, quad_n)
        rows.append({
            "target": target_name, "m": m, "T": T, "t": err.t_effective,
            "residual_rms": fit.residual_rms, "ridge": fit.ridge,
            "error_outside": err.outside, "error_inside": err.inside,
            "error_heldout_2T": held.outside,
        })
    return rows


def write_samples_csv(path, fit: FittedKernel, target: MemoryKernel,
                      s_max: float, n: int = 200, provenance: dict | None = None) -> None:
    prov = provenance or {}
    meta = [str(prov.get(k, "")) for k in ("config_hash", "seed", "precision", "version")]
    s = np.linspace(0.0, s_max, n)
    view = change_of_variable_view(fit, target, s_max=s_max, n=n)
    with open(path, "w", newline="") as fh:
        fh.write("s,rho,rho_hat,u,transported_rho,poly,config_hash,seed,precision,version\r\n")
        rho = target.rho(s)
        rho_hat = fit.rho(s)
        for i in range(n):
            row = [repr(float(v)) for v in
                   (s[i], rho[i], rho_hat[i], view.u[i], view.transported_rho[i], view.poly[i])]
            fh.write(",".join(row + meta) + "\r\n")


def write_summary_json(path, rows: list[dict], provenance: dict | None = None) -> None:
    doc = {"provenance": provenance or {}, "results": rows}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
