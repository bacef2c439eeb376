import os
import sys
import warnings

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))

from LatentPrefPython import DegenerateSamplingWarning  # noqa: E402
from tensor import RngStream, finiteDiffGrad, grad, relativeError, zeroGrad  # noqa: E402
import denoiser  # noqa: E402
import diffusion  # noqa: E402


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def schedule():
    return diffusion.buildLinearSchedule()


@pytest.fixture
def tinyConfig():
    """A denoiser small enough for gradient checks and fast rollouts."""
    return denoiser.DenoiserConfig(channels = 2, size = 4, L = 1, width = 4, nP = 4, vocab = 3, timeEmbedDim = 4, ctxDim = 8)


@pytest.fixture
def tinyNet(tinyConfig):
    return denoiser.Denoiser(tinyConfig, RngStream(99).derive("init"))


@pytest.fixture
def task(tinyConfig):
    return denoiser.SyntheticTask(tinyConfig, RngStream(5).derive("task"))


@pytest.fixture
def quiet():
    """Silences DegenerateSamplingWarning for tests that provoke it on purpose."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateSamplingWarning)
        yield


def _gradientError(lossFn, params, seed, nCoords = 16, floor = 1e-4):
    """
    Worst relative error between grad() and central differences over
    nCoords coordinates picked at random (by seed) across params.
    """
    params = list(params)
    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = np.random.default_rng(seed).choice(int(offsets[-1]), size = min(nCoords, int(offsets[-1])), replace = False)
    coords = dict()
    for k in sorted(picks):
        j = int(np.searchsorted(offsets, k, side = "right")) - 1
        coords.setdefault(params[j], []).append(int(k - offsets[j]))

    zeroGrad(params)
    analytic = grad(lossFn())
    numeric = finiteDiffGrad(lossFn, list(coords), coords = coords)
    worst = 0.0
    for p, idx in coords.items():
        a = analytic[p].flat[idx] if p in analytic else np.zeros(len(idx))
        worst = max(worst, relativeError(a, numeric[p].flat[idx], floor))
    return worst


@pytest.fixture
def gradientError():
    """gradientError(lossFn, params, seed, nCoords = 16, floor = 1e-4)"""
    return _gradientError
