"""Shared scene fixtures.

``suite_problem`` mirrors the benchmark configuration: heavy sigma weighting
keeps estimation errors inside the policy observation clip and makes the
factor-of-two heuristic pay a visible iteration cost next to light damping,
while the mild pixel noise keeps undamped steps stable near the optimum.
"""

import pytest

from balm.scene import generate_synthetic


def suite_problem(seed, num_cameras=10, num_points=10):
    return generate_synthetic(
        num_cameras, num_points, pixel_sigma=250.0, noise_std=0.5, seed=seed
    )


@pytest.fixture(scope="session")
def tiny_problem():
    """Four cameras: small enough that the dense path is the automatic choice."""
    return generate_synthetic(4, 6, seed=1)


@pytest.fixture(scope="session")
def default_problem():
    """Mid-size scene at the generator defaults (unweighted, noisy pixels)."""
    return generate_synthetic(6, 30, seed=0)


@pytest.fixture(scope="session")
def suite_problem_0():
    return suite_problem(0)
