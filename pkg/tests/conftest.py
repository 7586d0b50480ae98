import numpy as np
import pytest

from anomalyfactory.trainpipe import build_toy_corpus


def random_image(rng: np.random.Generator, side: int = 32) -> np.ndarray:
    return rng.random((side, side, 3), dtype=np.float32)


def random_edge(rng: np.random.Generator, side: int = 32) -> np.ndarray:
    return rng.random((side, side, 1), dtype=np.float32)


def random_mask(rng: np.random.Generator, side: int = 32) -> np.ndarray:
    return (rng.random((side, side, 1)) > 0.7).astype(np.float32)


def square_image(side: int = 32, lo: float = 0.1, hi: float = 0.9) -> np.ndarray:
    """Dark canvas with a bright centered square; its edges are easy to find."""
    image = np.full((side, side, 3), lo, dtype=np.float32)
    q = side // 4
    image[q : side - q, q : side - q] = hi
    return image


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Small shared corpus for loader and pipeline contract tests."""
    out = tmp_path_factory.mktemp("toycorpus")
    manifest = build_toy_corpus(out, n_per_category=6, categories=2, resolution=64, seed=7)
    return out, manifest
