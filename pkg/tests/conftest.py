import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rigidsplat.synthgen import SynthConfig, generate

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def finite_difference(f, x, idx, eps=1e-6):
    """Central difference of scalar ``f()`` w.r.t. ``x.flat[idx]`` (x modified in place)."""
    flat = x.reshape(-1)
    old = flat[idx]
    flat[idx] = old + eps
    fp = f()
    flat[idx] = old - eps
    fm = f()
    flat[idx] = old
    return (fp - fm) / (2 * eps)


def rel_err(a, b, floor=1e-7):
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture(scope="session")
def tiny_bundle():
    return generate(SynthConfig(width=32, height=32, focal=32.0, object_blobs=800, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
