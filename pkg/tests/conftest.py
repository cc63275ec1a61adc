"""Shared test environment.

BLAS threads are pinned to 1 before numpy loads: on small machines the
OpenBLAS spin-wait slows every ufunc that follows a GEMM, and single-threaded
execution is also the package's documented bit-reproducibility mode.
"""

import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402  (import after the env pins)
import pytest  # noqa: E402


@pytest.fixture(autouse=True)
def _float64_default():
    """Every test starts and ends in float64 mode."""
    from ssmlab import ndcore

    ndcore.set_dtype("float64")
    yield
    ndcore.set_dtype("float64")


@pytest.fixture(scope="session")
def demo_corpus_tokens():
    from ssmlab import carry

    return carry.load_corpus(carry.build_demo_corpus(1_200_000))


def structured_bytes(n: int, seed: int = 0) -> np.ndarray:
    """Random-walk text over a small alphabet; mildly learnable."""
    rng = np.random.default_rng(seed)
    steps = rng.integers(-2, 3, size=n)
    return (np.mod(np.cumsum(steps), 26) + 97).astype(np.uint8)
