import numpy as np
import pytest

from ecoclab import codebook as cbk


@pytest.fixture(scope="session")
def cb_5x8() -> cbk.Codebook:
    return cbk.generate_mmd(5, 8, 2000, seed=42)


@pytest.fixture(scope="session")
def cb_8x32() -> cbk.Codebook:
    return cbk.generate_mmd(8, 32, 20_000, seed=11)


@pytest.fixture(scope="session")
def complementary_pair() -> cbk.Codebook:
    # intentionally fails column validity (only K=1 two-class codebooks are
    # column-valid); used where only row structure matters
    return cbk.Codebook(matrix=np.array([[0] * 8, [1] * 8], dtype=np.uint8))
