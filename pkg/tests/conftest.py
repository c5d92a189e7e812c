from __future__ import annotations

import numpy as np
import pytest

from visreason.images import ImageStore


def make_image(seed: int, width: int = 32, height: int = 32) -> np.ndarray:
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(height, width, 4), dtype=np.uint8)
    img[:, :, 3] = 255
    return img


@pytest.fixture
def store() -> ImageStore:
    return ImageStore()


@pytest.fixture
def base_image() -> np.ndarray:
    return make_image(7)
