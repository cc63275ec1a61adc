"""Diagonal linear state-space layer with interchangeable execution paths.

The recurrence h' = decay * h + (U x + b) can be evaluated three ways:
step-by-step (``sequential_scan``), with a work-efficient associative scan
(``parallel_scan``), or as an FFT convolution against the decay kernel
(``fft_convolve``, forward-only). All three agree elementwise; the tests pin
the tolerances. The input-gated variant replaces the fixed decay and drive
with per-step functions of the input and is supported by the first two paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .ndcore import Tensor


class UnsupportedConfiguration(TypeError):
    """Operation does not apply to this layer variant."""


# ---------------------------------------------------------------------------
# parameters

ACTIVATIONS = {
    "identity": lambda t: t,
    "tanh": nd.tanh,
    "gelu": nd.gelu,
}


@dataclass
class SsmLayerParams:
    """Time-invariant diagonal layer.

    The decay diagonal is parameterized as decay_i = exp(-exp(log_neg_decay_i)),
    which keeps every entry strictly inside (0, 1) for any finite parameter.
    """

    log_neg_decay: Tensor  # (m,)
    U: Tensor              # (m, d)
    b: Tensor              # (m,)
    C: Tensor              # (d_out, m)
    activation: str = "identity"

    @property
    def m(self) -> int:
        return self.log_neg_decay.shape[0]

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def d_out(self) -> int:
        return self.C.shape[0]

    def decay(self) -> Tensor:
        return nd.exp(-nd.exp(self.log_neg_decay))


@dataclass
class GatedSsmParams:
    """Input-dependent variant with an (m, d) elementwise hidden state.

    gate(x)[i, j] = sigmoid((P x)_i + r[i, j])       entries in (0, 1)
    drive(x)[i, j] = (B x)_i * x_j + c[i, j]
    readout contracts the state axis: y_j = sum_i C[i, j] * act(h[i, j])
    """

    P: Tensor  # (m, d) gate projection
    r: Tensor  # (m, d) gate bias
    B: Tensor  # (m, d) drive projection
    c: Tensor  # (m, d) drive bias
    C: Tensor  # (m, d) readout
    activation: str = "identity"

    @property
    def m(self) -> int:
        return self.P.shape[0]

    @property
    def d(self) -> int:
        return self.P.shape[1]

    @property
    def d_out(self) -> int:
        return self.C.shape[1]

    def gates(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Per-step gate and drive for x of shape (..., d), each (..., m, d)."""
        proj = (x @ self.P.swapaxes(0, 1)).reshape(x.shape[:-1] + (self.m, 1))
        w = nd.sigmoid(proj + self.r)
        drive_scale = (x @ self.B.swapaxes(0, 1)).reshape(x.shape[:-1] + (self.m, 1))
        u = drive_scale * x.reshape(x.shape[:-1] + (1, self.d)) + self.c
        return w, u


def init_ssm_params(rng: np.random.Generator, m: int, d: int, d_out: int,
                    activation: str = "identity",
                    decay_range: tuple[float, float] = (0.9, 0.999)) -> SsmLayerParams:
    """Fresh layer with decays log-uniform in ``decay_range``."""
    lo, hi = decay_range
    lam = np.exp(rng.uniform(np.log(lo), np.log(hi), size=m))
    theta = np.log(-np.log(lam))
    return SsmLayerParams(
        log_neg_decay=Tensor(theta, requires_grad=True),
        U=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(m, d)), requires_grad=True),
        b=Tensor(np.zeros(m), requires_grad=True),
        C=Tensor(rng.normal(0.0, 1.0 / np.sqrt(m), size=(d_out, m)), requires_grad=True),
        activation=activation,
    )


def init_gated_params(rng: np.random.Generator, m: int, d: int,
                      activation: str = "identity") -> GatedSsmParams:
    sd = 1.0 / np.sqrt(d)
    return GatedSsmParams(
        P=Tensor(rng.normal(0.0, sd, size=(m, d)), requires_grad=True),
        r=Tensor(np.full((m, d), 2.0), requires_grad=True),  # open gates at init
        B=Tensor(rng.normal(0.0, sd, size=(m, d)), requires_grad=True),
        c=Tensor(np.zeros((m, d)), requires_grad=True),
        C=Tensor(rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, d)), requires_grad=True),
        activation=activation,
    )


# ---------------------------------------------------------------------------
# scan elements and the associative combine

@dataclass
class ScanElement:
    """(multiplier, additive) pair carried by the associative scan."""

    w: Tensor
    h: Tensor

    @staticmethod
    def identity(shape) -> "ScanElement":
        return ScanElement(nd.ones(shape), nd.zeros(shape))


def scan_combine(a: ScanElement, b: ScanElement) -> ScanElement:
    """Combine with ``a`` the newer element and ``b`` the older one.

    (W_a, h_a) o (W_b, h_b) = (W_b * W_a, h_a + W_a * h_b); folding a step
    sequence right-to-left onto the identity element reproduces the
    recurrence, with the newest step applied on the left.
    """
    if a.w.shape != b.w.shape or a.h.shape != b.h.shape:
        raise nd.ShapeMismatch(
            f"scan_combine: shapes {a.w.shape}/{a.h.shape} vs {b.w.shape}/{b.h.shape}")
    return ScanElement(b.w * a.w, a.h + a.w * b.h)


def elements_from_params(p: SsmLayerParams, xs: Tensor) -> ScanElement:
    """Stacked per-step elements (decay, U x_k + b) for xs of shape (T, ..., d)."""
    u = xs @ p.U.swapaxes(0, 1) + p.b
    w = nd.exp(-nd.exp(p.log_neg_decay))
    w_full = nd.zeros(u.shape) + w  # broadcast to (T, ..., m)
    return ScanElement(w_full, u)


def elements_from_gated(p: GatedSsmParams, xs: Tensor) -> ScanElement:
    w, u = p.gates(xs)
    return ScanElement(w, u)


# ---------------------------------------------------------------------------
# execution paths

def recurrence_step(h: Tensor, x: Tensor, p: SsmLayerParams) -> Tensor:
    """One step h' = decay * h + (U x + b); raises on non-finite operands."""
    if not (h.all_finite() and x.all_finite()):
        raise nd.OverflowDetected("non-finite state or input in recurrence_step")
    return p.decay() * h + (x @ p.U.swapaxes(0, 1) + p.b)


def gated_step(h: Tensor, x: Tensor, p: GatedSsmParams) -> Tensor:
    """One gated step h' = gate(x) * h + drive(x)."""
    if not (h.all_finite() and x.all_finite()):
        raise nd.OverflowDetected("non-finite state or input in gated_step")
    w, u = p.gates(x)
    return w * h + u


def sequential_scan(elems: ScanElement, h0: Tensor) -> Tensor:
    """Reference fold of the per-step elements; output k is h_{k+1}.

    elems tensors are (T, ...); h0 is (...). Returns (T, ...) hidden states.
    """
    T = elems.w.shape[0]
    if T < 1:
        raise ValueError("sequential_scan needs at least one element")
    h = h0
    outs = []
    for k in range(T):
        h = elems.w[k] * h + elems.h[k]
        if not h.all_finite():
            raise nd.OverflowDetected("non-finite hidden state", step=k)
        outs.append(h)
    return nd.stack(outs, axis=0)


def parallel_scan(elems: ScanElement, h0: Tensor) -> Tensor:
    """Work-efficient tree scan; equals ``sequential_scan`` elementwise.

    The initial state enters as an extra (1, h0) element on the old end.
    The recursion combines adjacent pairs (up-sweep), scans the halved
    sequence, then fixes up the even positions (down-sweep); total work is
    O(T) combines at O(log T) depth, and every operation is an ndcore
    primitive so gradients flow.
    """
    T = elems.w.shape[0]
    if T < 1:
        raise ValueError("parallel_scan needs at least one element")
    lead = ScanElement(
        nd.ones((1,) + h0.shape),
        h0.reshape((1,) + h0.shape),
    )
    w = nd.concat([lead.w, elems.w], axis=0)
    u = nd.concat([lead.h, elems.h], axis=0)
    pw, pu = _scan_tree(w, u)
    return pu[1:]


def _scan_tree(w: Tensor, u: Tensor) -> tuple[Tensor, Tensor]:
    n = w.shape[0]
    if n == 1:
        return w, u
    half = n // 2
    we, ue = w[0 : 2 * half : 2], u[0 : 2 * half : 2]
    wo, uo = w[1 : 2 * half : 2], u[1 : 2 * half : 2]
    # up-sweep: combine(newer=odd, older=even)
    sw, su = _scan_tree(we * wo, uo + wo * ue)
    # down-sweep: odd outputs are the pair prefixes; even position 2i (i>=1)
    # combines its own element onto the prefix ending at 2i-1
    n_fix = (n + 1) // 2 - 1
    ev_w = [w[0:1]]
    ev_u = [u[0:1]]
    if n_fix:
        tail_w = w[2 : 2 * n_fix + 2 : 2]
        tail_u = u[2 : 2 * n_fix + 2 : 2]
        ev_w.append(sw[:n_fix] * tail_w)
        ev_u.append(tail_u + tail_w * su[:n_fix])
    evens_w = nd.concat(ev_w, axis=0) if len(ev_w) > 1 else ev_w[0]
    evens_u = nd.concat(ev_u, axis=0) if len(ev_u) > 1 else ev_u[0]
    out_w = _interleave(evens_w, sw, n)
    out_u = _interleave(evens_u, su, n)
    return out_w, out_u


def _interleave(evens: Tensor, odds: Tensor, n: int) -> Tensor:
    half = n // 2
    pairs = nd.stack([evens[:half], odds[:half]], axis=1)
    flat = pairs.reshape((2 * half,) + tuple(evens.shape[1:]))
    if n % 2:
        flat = nd.concat([flat, evens[half:]], axis=0)
    return flat


def fft_convolve(p: SsmLayerParams, xs: Tensor, h0: Tensor) -> Tensor:
    """Hidden states via zero-padded circular convolution with the decay kernel.

    Forward-only: computed in plain numpy (float64 internally) and returned
    as a constant tensor. Gated layers have no convolution form.
    """
    if isinstance(p, GatedSsmParams):
        raise UnsupportedConfiguration("fft_convolve requires a time-invariant layer")
    T = xs.shape[0]
    lam = np.exp(-np.exp(p.log_neg_decay.data)).astype(np.float64)
    u = (xs.data @ p.U.data.T + p.b.data).astype(np.float64)  # (T, ..., m)
    ks = np.arange(T)
    kernel = lam[None, :] ** ks[:, None]  # (T, m)
    n_fft = 1
    while n_fft < 2 * T:
        n_fft *= 2
    kern_f = np.fft.rfft(kernel, n=n_fft, axis=0)
    shape = [1] * u.ndim
    shape[0] = kern_f.shape[0]
    shape[-1] = kern_f.shape[1]
    u_f = np.fft.rfft(u, n=n_fft, axis=0)
    conv = np.fft.irfft(u_f * kern_f.reshape(shape), n=n_fft, axis=0)[:T]
    decay_pow = lam[None, :] ** (ks[:, None] + 1)  # decay^(k+1) multiplies h0
    h0_term = h0.data.astype(np.float64) * decay_pow.reshape((T,) + (1,) * (u.ndim - 2) + (lam.size,))
    return Tensor(conv + h0_term)


def readout(hs: Tensor, p) -> Tensor:
    """Per-step outputs C * act(h) for stacked hidden states."""
    act = ACTIVATIONS[p.activation]
    if isinstance(p, GatedSsmParams):
        return (act(hs) * p.C).sum(axis=-2)
    return act(hs) @ p.C.swapaxes(0, 1)


def run_layer(p, xs: Tensor, h0: Tensor, path: str = "scan") -> tuple[Tensor, Tensor]:
    """Full layer pass: (T, ..., d) inputs to (outputs, stacked hidden states)."""
    if isinstance(p, GatedSsmParams):
        elems = elements_from_gated(p, xs)
        if path == "fft":
            raise UnsupportedConfiguration("fft path requires a time-invariant layer")
    else:
        elems = elements_from_params(p, xs)
    if path == "scan":
        hs = parallel_scan(elems, h0)
    elif path == "seq":
        hs = sequential_scan(elems, h0)
    elif path == "fft":
        hs = fft_convolve(p, xs, h0)
    else:
        raise ValueError(f"unknown execution path {path!r}")
    return readout(hs, p), hs
