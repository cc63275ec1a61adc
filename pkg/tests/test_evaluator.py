import math

import numpy as np
import pytest

from ssmlab import evaluator, models
from ssmlab.evaluator import (LengthExtensionReport, MarkovLanguageSpec,
                              brute_force_conditional_entropy, classify_extension,
                              entropy_monotonicity_check, markov_conditional_entropy,
                              perplexity_by_length, two_state_spec)
from ssmlab.ndcore import Tensor


class StubModel:
    """Duck-typed model emitting fixed per-token distributions."""

    def __init__(self, fn, vocab=256):
        self.fn = fn
        self.vocab = vocab

    def forward(self, inputs, h0=None):
        B, T = inputs.shape
        logits = np.zeros((B, T, self.vocab))
        for b in range(B):
            for t in range(T):
                logits[b, t] = self.fn(inputs[b, : t + 1])
        return Tensor(logits), [Tensor(np.zeros((B, 1)))], []


def test_ideal_memorizer_of_periodic_stream_reaches_ppl_one():
    period = 8
    stream = np.tile(np.arange(period), 64)

    def next_token_logits(prefix):
        logits = np.full(256, -1e9)
        logits[(prefix[-1] + 1) % period] = 1e9 * 0  # one-hot via margin below
        logits[(prefix[-1] + 1) % period] = 60.0
        return logits

    model = StubModel(next_token_logits)
    report = perplexity_by_length(model, stream, [period, 2 * period])
    assert all(abs(p - 1.0) < 1e-6 for p in report.perplexities)


def test_uniform_model_on_random_bytes_gives_ppl_256():
    stream = np.random.default_rng(0).integers(0, 256, size=2048)
    model = StubModel(lambda prefix: np.zeros(256))
    report = perplexity_by_length(model, stream, [16, 64])
    assert all(abs(p - 256.0) < 1e-9 for p in report.perplexities)


def test_trained_model_report_bit_reproducible():
    cfg = models.ModelConfig(kind="ssm", n_layers=1, d_model=8, m=4)
    model = models.LanguageModel(cfg, seed=0)
    stream = np.random.default_rng(1).integers(0, 256, size=1024)
    a = perplexity_by_length(model, stream, [8, 16, 32], seed=5)
    b = perplexity_by_length(model, stream, [8, 16, 32], seed=5)
    assert a.to_csv() == b.to_csv()


def test_zero_carry_reports_identical_between_modes():
    cfg = models.ModelConfig(kind="ssm", n_layers=1, d_model=8, m=4)
    model = models.LanguageModel(cfg, seed=2)
    stream = np.random.default_rng(3).integers(0, 256, size=2048)
    cont = perplexity_by_length(model, stream, [16, 32], mode="contiguous")
    shuf = perplexity_by_length(model, stream, [16, 32], mode="shuffled", seed=11)
    assert cont.perplexities == shuf.perplexities


def test_carry_across_windows_differs_between_modes():
    cfg = models.ModelConfig(kind="ssm", n_layers=1, d_model=8, m=4)
    model = models.LanguageModel(cfg, seed=4)
    stream = np.tile(np.frombuffer(b"abcdefghijklmnopqrstuvwxyz01", dtype=np.uint8), 64).astype(np.int64)
    cont = perplexity_by_length(model, stream, [16], carry_across_windows=True,
                                mode="contiguous")
    shuf = perplexity_by_length(model, stream, [16], carry_across_windows=True,
                                mode="shuffled", seed=7)
    assert cont.perplexities != shuf.perplexities


def test_stream_too_short_rejected():
    model = StubModel(lambda prefix: np.zeros(256))
    with pytest.raises(ValueError, match="too short"):
        perplexity_by_length(model, np.zeros(16, dtype=np.int64), [32])


def test_final_position_averaging_mode():
    """position_avg='final' scores only each window's last token."""
    period = 8
    stream = np.tile(np.arange(period), 64)

    def logits_fn(prefix):
        # perfect at the final position of any window, uniform elsewhere
        out = np.zeros(256)
        if len(prefix) == period:
            out[(prefix[-1] + 1) % period] = 60.0
        return out

    model = StubModel(logits_fn)
    rep_final = perplexity_by_length(model, stream, [period], position_avg="final")
    rep_all = perplexity_by_length(model, stream, [period], position_avg="all")
    assert abs(rep_final.perplexities[0] - 1.0) < 1e-6
    assert rep_all.perplexities[0] > 10.0


# -- classification ------------------------------------------------------------------

def report_from(ppls, lengths=None):
    lengths = lengths or [2 ** (4 + i) for i in range(len(ppls))]
    return LengthExtensionReport(lengths=lengths, perplexities=list(ppls), mode="contiguous")


def test_classify_strong():
    assert classify_extension(report_from([10, 9, 8, 7]), T0=16, epsilon=0.0) == "Strong"


def test_classify_weak():
    assert classify_extension(report_from([10, 10, 10]), T0=16, epsilon=0.0) == "Weak"


def test_classify_none():
    assert classify_extension(report_from([10, 9, 12]), T0=16, epsilon=0.0) == "None"


def test_classify_needs_two_steps_beyond_t0():
    with pytest.raises(ValueError, match="T0"):
        classify_extension(report_from([10, 9, 8]), T0=64, epsilon=0.0)


def test_classify_scale_invariant_at_zero_epsilon():
    base = [10.0, 9.0, 8.5, 8.5, 9.5]
    for scale in (0.3, 1.0, 7.0):
        scaled = [scale * p for p in base]
        assert classify_extension(report_from(scaled), T0=16, epsilon=0.0) == \
            classify_extension(report_from(base), T0=16, epsilon=0.0)


def test_report_validates_monotone_lengths():
    with pytest.raises(ValueError, match="increasing"):
        LengthExtensionReport(lengths=[16, 16], perplexities=[2.0, 2.0], mode="contiguous")


# -- Markov oracle ---------------------------------------------------------------------

def test_iid_uniform_entropy_is_log2():
    spec = MarkovLanguageSpec(np.full((2, 2), 0.5), np.array([0.5, 0.5]))
    for k in range(6):
        assert abs(markov_conditional_entropy(spec, k) - math.log(2)) < 1e-12


def test_deterministic_cycle_has_zero_entropy():
    P = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=float)
    spec = MarkovLanguageSpec(P, np.array([1.0, 0.0, 0.0]))
    for k in range(1, 6):
        assert markov_conditional_entropy(spec, k) == 0.0


def test_two_state_symmetric_chain_closed_form():
    spec = two_state_spec(0.9)
    expected = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
    for k in range(1, 11):
        assert abs(markov_conditional_entropy(spec, k) - expected) < 1e-12


def test_brute_force_matches_dp_up_to_k10():
    specs = [two_state_spec(0.9),
             MarkovLanguageSpec(np.array([[0.7, 0.2, 0.1],
                                          [0.05, 0.9, 0.05],
                                          [0.3, 0.3, 0.4]]),
                                np.array([0.2, 0.5, 0.3]))]
    for spec in specs:
        kmax = 10 if spec.n_states == 2 else 9
        for k in range(1, kmax + 1):
            bf = brute_force_conditional_entropy(spec, k)
            dp = markov_conditional_entropy(spec, k)
            assert abs(bf - dp) < 1e-9, (spec.n_states, k)


def test_monotonicity_chain_on_random_specs():
    rng = np.random.default_rng(42)
    for _ in range(25):
        spec = evaluator.random_spec(rng, int(rng.integers(2, 4)))
        verdict = entropy_monotonicity_check(spec, k_max=5)
        assert verdict.ok, verdict


def test_monotonicity_equalities_for_independent_source():
    spec = MarkovLanguageSpec(np.tile([0.3, 0.7], (2, 1)), np.array([0.3, 0.7]))
    verdict = entropy_monotonicity_check(spec, k_max=4)
    for row in verdict.rows:
        assert abs(row["full"] - row["marginal"]) < 1e-12


def test_monotonicity_deterministic_chain_zero_lhs():
    P = np.array([[0, 1], [1, 0]], dtype=float)
    spec = MarkovLanguageSpec(P, np.array([0.5, 0.5]))
    verdict = entropy_monotonicity_check(spec, k_max=4)
    for row in verdict.rows:
        assert row["full"] < 1e-12


def test_enumeration_guard_trips():
    spec = MarkovLanguageSpec(np.full((10, 10), 0.1), np.full(10, 0.1))
    with pytest.raises(ValueError, match="cap"):
        entropy_monotonicity_check(spec, k_max=8)


def test_invalid_transition_matrix_rejected():
    with pytest.raises(ValueError, match="distributions"):
        MarkovLanguageSpec(np.array([[0.5, 0.6], [0.5, 0.5]]), np.array([0.5, 0.5]))


def test_window_entropy_floor_two_state():
    spec = two_state_spec(0.9)
    h_cond = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
    L = 64
    floor = evaluator.window_entropy_floor(spec, L)
    expected = (math.log(2) + (L - 1) * h_cond) / L
    assert abs(floor - expected) < 1e-12


def test_sampled_stream_statistics_match_spec():
    spec = two_state_spec(0.9)
    stream = spec.sample(20000, seed=0)
    stays = float(np.mean(stream[1:] == stream[:-1]))
    assert abs(stays - 0.9) < 0.01
