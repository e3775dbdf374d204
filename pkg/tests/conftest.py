import numpy as np
import pytest


def make_two_moons(n: int, seed: int, noise: float = 0.08) -> np.ndarray:
    rng = np.random.default_rng(seed)
    half = n // 2
    theta = rng.uniform(0.0, np.pi, n)
    z = np.empty((n, 2))
    z[:half, 0] = np.cos(theta[:half])
    z[:half, 1] = np.sin(theta[:half])
    z[half:, 0] = 1.0 - np.cos(theta[half:])
    z[half:, 1] = 0.5 - np.sin(theta[half:])
    return z + noise * rng.standard_normal((n, 2))


def circle_points(n: int) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(n) / n
    return np.column_stack([np.cos(angles), np.sin(angles)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
