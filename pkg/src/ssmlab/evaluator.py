"""Perplexity-versus-length measurement and classification, plus the exact
entropy oracle for synthetic Markov languages.

Per-length evaluation always starts each window from zero hidden states:
the length axis probes what the model can reconstruct from scratch. The
contiguous/shuffled distinction matters when ``carry_across_windows`` is
enabled, which threads final states between successive windows of the same
evaluation slot; a contiguous stream then supplies informative carry while a
shuffled one injects noise from unrelated text.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .ndcore import Tensor


# ---------------------------------------------------------------------------
# length-extension reports

@dataclass
class LengthExtensionReport:
    lengths: list[int]
    perplexities: list[float]
    mode: str
    classification: str = "unclassified"
    T0: int | None = None
    epsilon: float = 0.01
    position_avg: str = "all"
    carry_across_windows: bool = False
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.lengths, self.lengths[1:])):
            raise ValueError("lengths must be strictly increasing")
        if any(p <= 0 for p in self.perplexities):
            raise ValueError("perplexities must be positive")

    def to_json(self, path=None) -> str:
        doc = {
            "lengths": self.lengths,
            "perplexities": self.perplexities,
            "mode": self.mode,
            "classification": self.classification,
            "T0": self.T0,
            "epsilon": self.epsilon,
            "position_avg": self.position_avg,
            "carry_across_windows": self.carry_across_windows,
            "provenance": self.provenance,
        }
        text = json.dumps(doc, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, path=None) -> str:
        prov = self.provenance
        meta = [str(prov.get(k, "")) for k in ("config_hash", "seed", "precision", "version")]
        lines = ["length,perplexity,mode,config_hash,seed,precision,version"]
        for L, p in zip(self.lengths, self.perplexities):
            lines.append(",".join([str(L), repr(p), self.mode] + meta))
        text = "\r\n".join(lines) + "\r\n"
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def classify_extension(report: LengthExtensionReport, T0: int,
                       epsilon: float = 0.01) -> str:
    """Strong / Weak / None from the measured curve beyond T0.

    A measured step (L_i -> L_{i+1}) counts when L_i >= T0. Strong requires
    every such step to drop by more than epsilon; Weak tolerates flatness
    within +epsilon; anything that rises beyond epsilon is None. epsilon is
    in absolute perplexity units.
    """
    steps = [
        (a, b) for (La, a), (Lb, b) in zip(
            zip(report.lengths, report.perplexities),
            zip(report.lengths[1:], report.perplexities[1:]))
        if La >= T0
    ]
    if len(steps) < 2:
        raise ValueError(f"need at least 2 measured steps beyond T0={T0}")
    if all(b < a - epsilon for a, b in steps):
        return "Strong"
    if all(b <= a + epsilon for a, b in steps):
        return "Weak"
    return "None"


def perplexity_by_length(model, stream, lengths, mode: str = "contiguous",
                         *, carry_across_windows: bool = False,
                         position_avg: str = "all", T0: int | None = None,
                         epsilon: float = 0.01, seed: int = 0,
                         eval_slots: int = 16,
                         provenance: dict | None = None) -> LengthExtensionReport:
    """Perplexity of ``model`` on ``stream`` at each window length.

    For every L the stream is cut into consecutive non-overlapping windows of
    L+1 tokens (inputs and shift-by-one targets); each window is scored from
    zero initial hidden states unless ``carry_across_windows`` threads the
    final states of one window into the next window of the same slot. Window
    order is stream order in contiguous mode and a seeded permutation in
    shuffled mode; with zero carry the order cannot affect the result, which
    the tests assert.
    """
    if mode not in ("contiguous", "shuffled"):
        raise ValueError(f"unknown eval mode {mode!r}")
    if position_avg not in ("all", "final"):
        raise ValueError("position_avg must be 'all' or 'final'")
    stream = np.asarray(stream).astype(np.int64)
    lengths = sorted(int(x) for x in lengths)
    if max(lengths) + 1 > len(stream):
        raise ValueError(
            f"stream of {len(stream)} tokens too short for max length {max(lengths)}")
    ppls = []
    for L in lengths:
        nll = _mean_nll_at_length(model, stream, L, mode, carry_across_windows,
                                  position_avg, seed, eval_slots)
        ppls.append(float(np.exp(nll)))
    report = LengthExtensionReport(
        lengths=list(lengths), perplexities=ppls, mode=mode,
        T0=T0, epsilon=epsilon, position_avg=position_avg,
        carry_across_windows=carry_across_windows,
        provenance=provenance or {})
    t0 = T0 if T0 is not None else lengths[0]
    try:
        report.classification = classify_extension(report, t0, epsilon)
    except ValueError:
        report.classification = "unclassified"
    return report


def _mean_nll_at_length(model, stream, L, mode, carry_windows, position_avg,
                        seed, eval_slots) -> float:
    n_win = (len(stream) - 1) // L
    if n_win < 1:
        raise ValueError(f"stream too short for windows of length {L}")
    starts = np.arange(n_win, dtype=np.int64) * L
    slots = min(eval_slots, n_win)
    rounds = n_win // slots
    used = slots * rounds  # drop the remainder so every slot has equal depth
    if mode == "shuffled":
        # same window set as contiguous mode, order permuted
        order = np.random.default_rng(seed).permutation(used)
        grid = order.reshape(rounds, slots)
    else:
        # slot s walks a contiguous run of windows, mirroring a stream segment
        grid = np.arange(used, dtype=np.int64).reshape(slots, rounds).T

    # accumulate per-window sums, then reduce in window-id order so that the
    # two modes produce bit-identical results whenever carry is off
    win_nll = np.zeros(n_win)
    win_cnt = np.zeros(n_win, dtype=np.int64)
    states = None
    for r in range(rounds):
        ids = grid[r]
        pos = starts[ids]
        inputs = np.stack([stream[p : p + L] for p in pos])
        targets = np.stack([stream[p + 1 : p + L + 1] for p in pos])
        h0 = states if (carry_windows and states is not None) else None
        logits, finals, _ = model.forward(inputs, h0)
        if carry_windows:
            states = [Tensor(f.data.copy()) for f in finals]
        nll_bt = _nll_matrix(logits, targets)
        if position_avg == "final":
            win_nll[ids] += nll_bt[:, -1]
            win_cnt[ids] += 1
        else:
            win_nll[ids] += nll_bt.sum(axis=1)
            win_cnt[ids] += L
    return float(win_nll.sum() / win_cnt.sum())


def _nll_matrix(logits: Tensor, targets: np.ndarray) -> np.ndarray:
    """Per-position NLL (B, T) computed outside the autodiff graph."""
    z = logits.data
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return -picked


# ---------------------------------------------------------------------------
# Markov language oracle

ENUMERATION_CAP = 10**7


@dataclass
class MarkovLanguageSpec:
    """First-order chain over ``n`` states; states are emitted as tokens."""

    transition: np.ndarray
    initial: np.ndarray
    require_ergodic: bool = False

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        P, pi = self.transition, self.initial
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("transition matrix must be square")
        if (P < 0).any() or not np.allclose(P.sum(axis=1), 1.0, atol=1e-10):
            raise ValueError("transition rows must be distributions")
        if pi.shape != (P.shape[0],) or (pi < 0).any() or not np.isclose(pi.sum(), 1.0, atol=1e-10):
            raise ValueError("initial distribution invalid")
        if self.require_ergodic and (P <= 0).any():
            raise ValueError("ergodicity requested but transition has zero entries")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        out = np.empty(n, dtype=np.int64)
        state = rng.choice(self.n_states, p=self.initial)
        for i in range(n):
            out[i] = state
            state = rng.choice(self.n_states, p=self.transition[state])
        return out


def two_state_spec(p_stay: float = 0.9) -> MarkovLanguageSpec:
    P = np.array([[p_stay, 1 - p_stay], [1 - p_stay, p_stay]])
    return MarkovLanguageSpec(P, np.array([0.5, 0.5]))


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def markov_conditional_entropy(spec: MarkovLanguageSpec, k: int) -> float:
    """H(X_{k+1} | X_1..X_k) in nats, exactly, via the k-step distribution.

    For a first-order chain this equals H(X_{k+1} | X_k) once k >= 1: the
    distribution of X_k is initial @ P^(k-1), and the conditional entropy is
    the row-entropy average under it. k = 0 yields the marginal H(X_1).
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return _entropy(spec.initial)
    dist = spec.initial.copy()
    for _ in range(k - 1):
        dist = dist @ spec.transition
    row_h = np.array([_entropy(row) for row in spec.transition])
    return float(dist @ row_h)


def _joint_probs(spec: MarkovLanguageSpec, length: int) -> np.ndarray:
    """Joint probability tensor over all sequences of ``length`` tokens."""
    n = spec.n_states
    if n**length > ENUMERATION_CAP:
        raise ValueError(
            f"enumeration of {n}^{length} sequences exceeds the {ENUMERATION_CAP:.0e} cap")
    probs = spec.initial.copy()
    for _ in range(length - 1):
        probs = probs[..., None] * spec.transition[(None,) * (probs.ndim - 1)]
    return probs


def brute_force_conditional_entropy(spec: MarkovLanguageSpec, k: int,
                                    drop_first: int = 0) -> float:
    """H(X_{k+1} | X_{1+drop_first}..X_k) by explicit joint enumeration."""
    joint_full = _joint_probs(spec, k + 1)
    if drop_first:
        joint_full = joint_full.sum(axis=tuple(range(drop_first)))
    joint_hist = joint_full.sum(axis=-1)
    return _entropy(joint_full.reshape(-1)) - _entropy(joint_hist.reshape(-1))


@dataclass
class MonotonicityVerdict:
    ok: bool
    max_violation: float
    rows: list[dict]


def entropy_monotonicity_check(spec: MarkovLanguageSpec, k_max: int,
                               tol: float = 1e-9) -> MonotonicityVerdict:
    """Assert H(X_{k+1}|X_1..X_k) <= H(X_{k+1}|X_2..X_k) <= H(X_{k+1}).

    Conditioning on more history can never increase uncertainty; this is the
    exact finite check of that chain, by joint enumeration, for k <= k_max.
    """
    if k_max < 2:
        raise ValueError("k_max must be >= 2")
    worst = 0.0
    rows = []
    for k in range(1, k_max + 1):
        full = brute_force_conditional_entropy(spec, k)
        dropped = brute_force_conditional_entropy(spec, k, drop_first=1) if k >= 2 else full
        marginal_dist = _joint_probs(spec, k + 1).reshape(-1, spec.n_states).sum(axis=0)
        marginal = _entropy(marginal_dist)
        worst = max(worst, full - dropped, dropped - marginal)
        rows.append({"k": k, "full": full, "drop_first": dropped, "marginal": marginal})
    return MonotonicityVerdict(worst <= tol, worst, rows)


def random_spec(rng: np.random.Generator, n_states: int) -> MarkovLanguageSpec:
    P = rng.dirichlet(np.ones(n_states), size=n_states)
    pi = rng.dirichlet(np.ones(n_states))
    return MarkovLanguageSpec(P, pi)


def stationary_distribution(spec: MarkovLanguageSpec) -> np.ndarray:
    vals, vecs = np.linalg.eig(spec.transition.T)
    idx = int(np.argmin(np.abs(vals - 1.0)))
    v = np.abs(np.real(vecs[:, idx]))
    return v / v.sum()


def window_entropy_floor(spec: MarkovLanguageSpec, L: int) -> float:
    """Minimal achievable mean NLL over an L-token window, in nats.

    Position k inside the window can at best be predicted with entropy
    H(X_{k+1} | X_1..X_k); averaging those exact values gives the floor any
    model's measured mean NLL must respect. Exact when window starts are
    distributed like the spec's initial distribution (use the stationary
    distribution when sampling the corpus).
    """
    return float(sum(markov_conditional_entropy(spec, k) for k in range(L)) / L)
