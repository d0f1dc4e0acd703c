"""Shared fixtures: deterministic synthetic scenes at test-friendly sizes."""

import numpy as np
import pytest

from g3dpack import synth


@pytest.fixture(scope="session")
def blob_fixture():
    """64-Gaussian view-dependent scene with 8 ring cameras at 64x64."""
    return synth.synthesize_scene(7, 64, "random-blob")


@pytest.fixture(scope="session")
def small_blob():
    """32-Gaussian scene at 32x32 for fast training loops."""
    return synth.synthesize_scene(3, 32, "random-blob", resolution=32)


@pytest.fixture(scope="session")
def occlusion_fixture():
    """Two concentric splats; the rear one is invisible from every camera."""
    return synth.synthesize_scene(7, 2, "occlusion-pair")


def random_unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
