import numpy as np
import pytest

from queryforensics import Image, quantize


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, dims=(8, 8, 1)) -> Image:
    return Image(quantize(rng.random(dims)))


def random_delta(rng, dims=(8, 8, 1), scale=0.2) -> np.ndarray:
    a = random_image(rng, dims)
    b = Image(quantize(np.clip(a.data + rng.normal(0, scale, dims), 0, 1)))
    return b.data - a.data
