"""Hidden-state carry between consecutive batches, and the streaming batcher
the previous-init policy depends on.

The contiguous batcher splits the corpus into B equal segments and walks each
with its own cursor, so the token at (stream s, batch n+1, position 0)
immediately follows the token at (stream s, batch n, position T-1). Carrying
the final hidden states of batch n into batch n+1 then makes short-window
training see arbitrarily long context. Shuffled mode draws the same chunks in
random order, which breaks exactly that adjacency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .ndcore import Tensor


class StreamMismatch(ValueError):
    """Carry offered to a batch whose stream slots do not line up."""


@dataclass(frozen=True)
class CarryPolicy:
    kind: str = "zero"  # zero | previous
    detach: bool = True

    def __post_init__(self):
        if self.kind not in ("zero", "previous"):
            raise ValueError(f"unknown carry policy {self.kind!r}")


@dataclass
class CarryState:
    """Final-step hidden states of the prior batch, tagged by stream slot."""

    states: list  # per layer: Tensor (detach=False) or np.ndarray snapshot
    stream_ids: np.ndarray
    detached: bool = True
    overflowed: bool = False


@dataclass
class Batch:
    inputs: np.ndarray       # (B, T) token ids
    targets: np.ndarray      # (B, T) ids shifted by one within the stream
    stream_ids: np.ndarray   # (B,)
    epoch_boundary: np.ndarray  # (B,) bool: cursor wrapped before this batch


def load_corpus(source) -> np.ndarray:
    """Byte-level tokens from raw bytes, str, or a file path."""
    if isinstance(source, np.ndarray):
        return source.astype(np.int64)
    if isinstance(source, bytes):
        return np.frombuffer(source, dtype=np.uint8).astype(np.int64)
    if isinstance(source, str):
        return np.frombuffer(source.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    raise TypeError(f"cannot interpret corpus source of type {type(source)!r}")


def load_corpus_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return load_corpus(fh.read())


def build_demo_corpus(min_bytes: int = 1_200_000) -> bytes:
    """Deterministic plain-text corpus from the local Python stdlib sources.

    Real text with long-range structure, available offline on any machine
    that can run this package; files are concatenated in sorted order until
    the requested size is reached.
    """
    import sysconfig
    from pathlib import Path

    stdlib = Path(sysconfig.get_paths()["stdlib"])
    chunks: list[bytes] = []
    total = 0
    for path in sorted(stdlib.glob("*.py")):
        try:
            blob = path.read_bytes()
        except OSError:
            continue
        chunks.append(blob)
        total += len(blob)
        if total >= min_bytes:
            break
    if total < min_bytes:
        raise RuntimeError(
            f"stdlib sources supplied only {total} bytes (< {min_bytes})")
    return b"\n".join(chunks)


class StreamBatcher:
    """Serves (inputs, targets) chunks of length T from a byte corpus.

    contiguous mode: B independent cursors over B equal corpus segments;
    consecutive batches continue each stream exactly where it left off, and
    a cursor that cannot fit another T+1 tokens wraps to its segment start
    with the epoch flag raised for that stream.

    shuffled mode: the same chunk start positions, permuted per epoch, dealt
    B at a time; stream slots carry no adjacency meaning.
    """

    def __init__(self, corpus, batch_size: int, seq_len: int,
                 mode: str = "contiguous", seed: int = 0):
        self.tokens = load_corpus(corpus) if not isinstance(corpus, np.ndarray) else corpus.astype(np.int64)
        if mode not in ("contiguous", "shuffled"):
            raise ValueError(f"unknown batcher mode {mode!r}")
        self.B = batch_size
        self.T = seq_len
        self.mode = mode
        n = len(self.tokens)
        if n < batch_size * (seq_len + 1):
            raise ValueError(
                f"corpus of {n} tokens is too short for B={batch_size}, T={seq_len} "
                f"(needs at least {batch_size * (seq_len + 1)})")
        self.seg = n // batch_size
        self._seg_starts = np.arange(batch_size) * self.seg
        self._cursors = self._seg_starts.copy()
        self._rng = np.random.default_rng(seed)
        self._queue: list[int] = []
        self._fresh_epoch = np.zeros(batch_size, dtype=bool)

    def chunk_starts(self) -> np.ndarray:
        """All chunk start offsets one epoch covers, in stream order."""
        starts = []
        for s in range(self.B):
            pos = self._seg_starts[s]
            end = self._seg_starts[s] + self.seg
            while pos + self.T + 1 <= end:
                starts.append(pos)
                pos += self.T
        return np.array(starts, dtype=np.int64)

    def next_batch(self) -> Batch:
        if self.mode == "contiguous":
            return self._next_contiguous()
        return self._next_shuffled()

    def _next_contiguous(self) -> Batch:
        T = self.T
        inputs = np.empty((self.B, T), dtype=np.int64)
        targets = np.empty((self.B, T), dtype=np.int64)
        flags = np.zeros(self.B, dtype=bool)
        for s in range(self.B):
            end = self._seg_starts[s] + self.seg
            if self._cursors[s] + T + 1 > end:
                self._cursors[s] = self._seg_starts[s]
                flags[s] = True
            pos = self._cursors[s]
            window = self.tokens[pos : pos + T + 1]
            inputs[s] = window[:-1]
            targets[s] = window[1:]
            self._cursors[s] = pos + T
        return Batch(inputs, targets, np.arange(self.B), flags)

    def _next_shuffled(self) -> Batch:
        fresh = False
        if len(self._queue) < self.B:
            order = self._rng.permutation(self.chunk_starts())
            self._queue = list(order)
            fresh = True
        starts = [self._queue.pop(0) for _ in range(self.B)]
        T = self.T
        inputs = np.empty((self.B, T), dtype=np.int64)
        targets = np.empty((self.B, T), dtype=np.int64)
        for s, pos in enumerate(starts):
            window = self.tokens[pos : pos + T + 1]
            inputs[s] = window[:-1]
            targets[s] = window[1:]
        flags = np.full(self.B, fresh, dtype=bool)
        return Batch(inputs, targets, np.arange(self.B), flags)


def init_hidden(policy: CarryPolicy, carry: CarryState | None, batch: Batch,
                state_shapes: list[tuple]) -> list[Tensor]:
    """Per-layer initial hidden states for the incoming batch.

    Zero policy (and any cold start) produces zero tensors. Previous policy
    replays the snapshot, as constants when detached, raising if the snapshot
    belongs to different stream slots.
    """
    if policy.kind == "zero" or carry is None:
        return [nd.zeros(shape) for shape in state_shapes]
    if not np.array_equal(carry.stream_ids, batch.stream_ids):
        raise StreamMismatch(
            f"carry holds streams {carry.stream_ids.tolist()} but batch has "
            f"{batch.stream_ids.tolist()}")
    states = []
    reset = batch.epoch_boundary
    for layer_state, shape in zip(carry.states, state_shapes):
        if isinstance(layer_state, Tensor) and not carry.detached:
            t = layer_state  # live graph tensor: gradients flow across batches
            if reset.any():
                mask = (~reset).astype(float).reshape((-1,) + (1,) * (len(shape) - 1))
                t = t * Tensor(mask)
        else:
            arr = layer_state.data if isinstance(layer_state, Tensor) else layer_state
            if reset.any():
                rmask = reset.reshape((-1,) + (1,) * (len(shape) - 1))
                arr = np.where(rmask, 0.0, arr)
            t = Tensor(arr)
        states.append(t)
    return states


def capture_carry(final_states: list[Tensor], batch: Batch,
                  detach: bool = True) -> tuple[CarryState, bool]:
    """Snapshot last-step states for the next batch.

    Non-finite states degrade to a zero carry with the overflow flag set
    (the caller logs the event); they never propagate into the next batch.
    """
    overflow = any(not s.all_finite() for s in final_states)
    if overflow:
        states = [np.zeros(s.shape) for s in final_states]
        return CarryState(states, batch.stream_ids.copy(),
                          detached=True, overflowed=True), True
    if detach:
        states = [s.data.copy() for s in final_states]
    else:
        states = list(final_states)
    return CarryState(states, batch.stream_ids.copy(), detached=detach), False
