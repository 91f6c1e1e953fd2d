import numpy as np
import pytest

from mcres.parse import parse_bracketed
from mcres.splitter import Sample
from mcres.synthetic import SyntheticConfig, generate_dataset


def tree_sample(sid, text):
    return Sample(sid, parse_bracketed(text), None, np.zeros((1, 1), dtype=np.uint8))


def flat_sample(sid, phrase):
    """One internal node over the words of ``phrase``."""
    words = " ".join(f"(W {w})" for w in phrase.split())
    return tree_sample(sid, f"(NP {words})")


SMALL = SyntheticConfig(height=8, width=8, n_shapes=10, n_colors=10, n_train=1200, n_test=300)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(SMALL, 3)
