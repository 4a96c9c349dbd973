import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20250817)


def random_quat(rng):
    """Uniform random unit quaternion (Shoemake subgroup algorithm)."""
    u1, u2, u3 = rng.random(3)
    a = np.sqrt(1.0 - u1)
    b = np.sqrt(u1)
    return np.array([a * np.sin(2 * np.pi * u2),
                     a * np.cos(2 * np.pi * u2),
                     b * np.sin(2 * np.pi * u3),
                     b * np.cos(2 * np.pi * u3)])


def random_rotvec(rng, max_angle=0.95 * np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


def assert_quat_close(q1, q2, tol=1e-12):
    """Equality on the double cover: q and -q are the same rotation."""
    d = min(np.linalg.norm(q1 - q2), np.linalg.norm(q1 + q2))
    assert d < tol, "quaternions differ by %.3e (tol %.1e)" % (d, tol)
