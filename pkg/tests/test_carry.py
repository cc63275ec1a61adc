import numpy as np
import pytest

from ssmlab import carry, models, ndcore as nd, train
from ssmlab.ndcore import Tape, Tensor


def micro_model(seed=0, **overrides):
    cfg = models.ModelConfig(kind="ssm", n_layers=2, d_model=8, m=4, **overrides)
    return models.LanguageModel(cfg, seed=seed)


# -- batcher -------------------------------------------------------------------

def as_text(row):
    return "".join(chr(c) for c in row)


def test_contiguous_batches_on_tiny_corpus():
    b = carry.StreamBatcher(b"abcdefgh", batch_size=1, seq_len=3)
    one = b.next_batch()
    assert as_text(one.inputs[0]) == "abc"
    assert as_text(one.targets[0]) == "bcd"
    two = b.next_batch()
    assert as_text(two.inputs[0]) == "def"
    assert as_text(two.targets[0]) == "efg"


def test_two_streams_cover_halves_independently():
    corpus = bytes(range(40))
    b = carry.StreamBatcher(corpus, batch_size=2, seq_len=4)
    seen = [[], []]
    for _ in range(4):
        batch = b.next_batch()
        for s in range(2):
            if not batch.epoch_boundary[s]:
                seen[s].extend(batch.inputs[s].tolist())
    assert all(tok < 20 for tok in seen[0])
    assert all(tok >= 20 for tok in seen[1])
    assert seen[0] == sorted(seen[0])
    assert seen[1] == sorted(seen[1])


def test_adjacency_invariant_across_batches():
    corpus = np.random.default_rng(0).integers(0, 256, size=503).astype(np.uint8).tobytes()
    b = carry.StreamBatcher(corpus, batch_size=3, seq_len=7)
    prev = b.next_batch()
    for _ in range(10):
        nxt = b.next_batch()
        for s in range(3):
            if not nxt.epoch_boundary[s]:
                # position 0 of batch n+1 continues position T-1 of batch n
                assert nxt.inputs[s, 0] == prev.targets[s, -1]
        prev = nxt


def test_shuffled_mode_is_permutation_of_chunk_multiset():
    corpus = bytes(range(2, 252))
    cont = carry.StreamBatcher(corpus, batch_size=2, seq_len=5, mode="contiguous")
    shuf = carry.StreamBatcher(corpus, batch_size=2, seq_len=5, mode="shuffled", seed=123)
    starts = cont.chunk_starts()
    n_batches = len(starts) // 2
    cont_chunks = set()
    for pos in starts:
        cont_chunks.add(bytes(cont.tokens[pos : pos + 6]))
    shuf_chunks = []
    for _ in range(n_batches):
        batch = shuf.next_batch()
        for s in range(2):
            shuf_chunks.append(bytes(np.append(batch.inputs[s], batch.targets[s, -1])))
    assert sorted(shuf_chunks) == sorted(cont_chunks)


def test_shuffled_mode_deterministic_for_seed():
    corpus = bytes(range(256)) * 2
    runs = []
    for _ in range(2):
        b = carry.StreamBatcher(corpus, batch_size=2, seq_len=5, mode="shuffled", seed=9)
        runs.append([b.next_batch().inputs.tolist() for _ in range(5)])
    assert runs[0] == runs[1]


def test_corpus_too_short_raises():
    with pytest.raises(ValueError, match="too short"):
        carry.StreamBatcher(b"abc", batch_size=2, seq_len=3)


def test_epoch_boundary_wraps_cursor():
    b = carry.StreamBatcher(b"abcdefgh", batch_size=1, seq_len=3)
    flags = [b.next_batch().epoch_boundary[0] for _ in range(4)]
    assert flags[0] == False  # noqa: E712
    assert any(flags[1:])


# -- init_hidden / capture_carry ---------------------------------------------------

def batch_stub(B=2):
    return carry.Batch(
        inputs=np.zeros((B, 3), dtype=np.int64),
        targets=np.zeros((B, 3), dtype=np.int64),
        stream_ids=np.arange(B),
        epoch_boundary=np.zeros(B, dtype=bool),
    )


def test_zero_policy_gives_zeros():
    pol = carry.CarryPolicy("zero")
    states = carry.init_hidden(pol, None, batch_stub(), [(2, 4), (2, 4)])
    assert all(np.array_equal(s.data, np.zeros((2, 4))) for s in states)


def test_previous_policy_cold_start_is_zeros():
    pol = carry.CarryPolicy("previous")
    states = carry.init_hidden(pol, None, batch_stub(), [(2, 4)])
    assert np.array_equal(states[0].data, np.zeros((2, 4)))


def test_previous_policy_replays_carry_values():
    pol = carry.CarryPolicy("previous", detach=True)
    vals = np.random.default_rng(1).normal(size=(2, 4))
    batch = batch_stub()
    state, overflow = carry.capture_carry([Tensor(vals)], batch, detach=True)
    assert not overflow
    out = carry.init_hidden(pol, state, batch, [(2, 4)])
    assert np.array_equal(out[0].data, vals)
    assert not out[0].requires_grad


def test_stream_mismatch_raises():
    pol = carry.CarryPolicy("previous")
    batch = batch_stub()
    state, _ = carry.capture_carry([nd.zeros((2, 4))], batch, detach=True)
    other = batch_stub()
    other.stream_ids = np.array([5, 6])
    with pytest.raises(carry.StreamMismatch):
        carry.init_hidden(pol, state, other, [(2, 4)])


def test_nonfinite_carry_resets_to_zero_with_flag():
    batch = batch_stub()
    bad = Tensor(np.array([[1.0, np.inf], [0.0, 0.0]]))
    state, overflow = carry.capture_carry([bad], batch, detach=True)
    assert overflow and state.overflowed
    assert np.array_equal(state.states[0], np.zeros((2, 2)))


def test_epoch_boundary_resets_affected_stream_only():
    pol = carry.CarryPolicy("previous")
    batch = batch_stub()
    vals = np.ones((2, 4))
    state, _ = carry.capture_carry([Tensor(vals)], batch, detach=True)
    nxt = batch_stub()
    nxt.epoch_boundary = np.array([True, False])
    out = carry.init_hidden(pol, state, nxt, [(2, 4)])
    assert np.array_equal(out[0].data[0], np.zeros(4))
    assert np.array_equal(out[0].data[1], np.ones(4))


# -- forward equivalence and detachment ----------------------------------------------

def test_split_batches_equal_one_long_forward():
    """k carried batches of length T match a single length-kT forward, 1e-10."""
    model = micro_model(seed=3)
    rng = np.random.default_rng(4)
    B, T, k = 2, 6, 3
    tokens = rng.integers(0, 256, size=(B, T * k))

    long_logits, long_finals, _ = model.forward(tokens)

    pol = carry.CarryPolicy("previous", detach=False)
    state = None
    parts = []
    finals = None
    for j in range(k):
        batch = carry.Batch(tokens[:, j * T:(j + 1) * T], tokens[:, j * T:(j + 1) * T],
                            np.arange(B), np.zeros(B, dtype=bool))
        h0 = carry.init_hidden(pol, state, batch, model.state_shapes(B))
        logits, finals, _ = model.forward(batch.inputs, h0)
        parts.append(logits.data)
        state, _ = carry.capture_carry(finals, batch, detach=False)
    stitched = np.concatenate(parts, axis=1)
    assert np.abs(stitched - long_logits.data).max() < 1e-10
    for a, b in zip(finals, long_finals):
        assert np.abs(a.data - b.data).max() < 1e-10


def test_detached_carry_blocks_gradient_and_fd_sensitivity():
    """With detach the prior batch gets zero gradient; FD through the frozen
    boundary agrees (loss on batch n does not move when batch n-1 inputs are
    perturbed while the carry constant is held)."""
    model = micro_model(seed=5)
    rng = np.random.default_rng(6)
    B, T = 2, 5
    toks1 = rng.integers(0, 256, size=(B, T))
    toks2 = rng.integers(0, 256, size=(B, T))
    batch1 = carry.Batch(toks1, toks1, np.arange(B), np.zeros(B, dtype=bool))
    batch2 = carry.Batch(toks2, toks2, np.arange(B), np.zeros(B, dtype=bool))

    # run batch 1 from a leaf embedding injection so its graph has a leaf we
    # can interrogate after backward on the batch-2 loss
    probe = Tensor(rng.normal(size=model.state_shape(B)), requires_grad=True)
    model.zero_grad()
    with Tape() as tape:
        _, finals1, _ = model.forward(toks1, [probe, nd.zeros(model.state_shape(B))])
        state, _ = carry.capture_carry(finals1, batch1, detach=True)
        h0 = carry.init_hidden(carry.CarryPolicy("previous", detach=True), state,
                               batch2, model.state_shapes(B))
        logits2, _, _ = model.forward(toks2, h0)
        loss2 = train.cross_entropy(logits2, toks2)
    tape.backward(loss2)
    assert probe.grad is None or np.abs(probe.grad).max() == 0.0

    # finite differences with the captured carry frozen: loss2 is constant
    def loss2_with_frozen_carry():
        h0c = [Tensor(s) for s in state.states]
        lg, _, _ = model.forward(toks2, h0c)
        return float(train.cross_entropy(lg, toks2).data)

    base = loss2_with_frozen_carry()
    probe.data[0, 0] += 1e-3
    assert abs(loss2_with_frozen_carry() - base) < 1e-7
    probe.data[0, 0] -= 1e-3


def test_attached_carry_leaks_gradient():
    """Contrast case: without detach, the prior batch does receive gradient."""
    model = micro_model(seed=7)
    rng = np.random.default_rng(8)
    B, T = 2, 5
    toks1 = rng.integers(0, 256, size=(B, T))
    toks2 = rng.integers(0, 256, size=(B, T))
    batch1 = carry.Batch(toks1, toks1, np.arange(B), np.zeros(B, dtype=bool))
    batch2 = carry.Batch(toks2, toks2, np.arange(B), np.zeros(B, dtype=bool))
    probe = Tensor(rng.normal(size=model.state_shape(B)), requires_grad=True)
    with Tape() as tape:
        _, finals1, _ = model.forward(toks1, [probe, nd.zeros(model.state_shape(B))])
        state, _ = carry.capture_carry(finals1, batch1, detach=False)
        h0 = carry.init_hidden(carry.CarryPolicy("previous", detach=False), state,
                               batch2, model.state_shapes(B))
        logits2, _, _ = model.forward(toks2, h0)
        loss2 = train.cross_entropy(logits2, toks2)
    tape.backward(loss2)
    assert probe.grad is not None and np.abs(probe.grad).max() > 0.0


def test_zero_policy_invariant_to_shuffling_previous_is_not():
    """Zero-carry per-chunk losses ignore chunk order; previous-carry do not."""
    # crafted corpus: strong periodic structure so carried state matters
    pattern = b"abcdefghijklmnop" * 10
    model = micro_model(seed=10)
    T = 4

    def per_chunk_losses(policy_kind, mode):
        b = carry.StreamBatcher(pattern, 1, T, mode=mode, seed=3)
        n_chunks = len(b.chunk_starts())
        pol = carry.CarryPolicy(policy_kind, detach=True)
        state = None
        losses = []
        for _ in range(n_chunks):
            batch = b.next_batch()
            h0 = carry.init_hidden(pol, state if policy_kind == "previous" else None,
                                   batch, model.state_shapes(1))
            logits, finals, _ = model.forward(batch.inputs, h0)
            losses.append(float(train.cross_entropy(logits, batch.targets).data))
            state, _ = carry.capture_carry(finals, batch, detach=True)
        return losses

    zero_cont = per_chunk_losses("zero", "contiguous")
    zero_shuf = per_chunk_losses("zero", "shuffled")
    assert np.allclose(sorted(zero_cont), sorted(zero_shuf), atol=0, rtol=0)
    prev_cont = per_chunk_losses("previous", "contiguous")
    prev_shuf = per_chunk_losses("previous", "shuffled")
    assert not np.allclose(sorted(prev_cont), sorted(prev_shuf))
