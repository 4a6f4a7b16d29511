"""Shared fixtures.

The desk-scale trained network and the repeated-noise map stacks are
expensive (minutes); both are cached under tests/.cache keyed by their
inputs, so reruns of the suite skip straight to the assertions.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from precisedmi import _kernels, fileio
from precisedmi import neuralnet as nn
from precisedmi.signal_model import SpectralGrid, default_priors
from precisedmi.synth import (
    PhantomConfig,
    TrainingSampleSpec,
    build_phantom,
    phantom_to_dmi,
)

CACHE = Path(__file__).parent / ".cache"
DESK_ITERATIONS = 5000
DESK_SEED = 11


@pytest.fixture(scope="session")
def priors():
    return default_priors()


@pytest.fixture(scope="session")
def grid():
    return SpectralGrid()


@pytest.fixture(scope="session")
def tiny_arch():
    return nn.ArchitectureSpec(
        n_points=64,
        blocks=(nn.ConvBlock(2, 4), nn.ConvBlock(4, 4)),
        hidden=8,
    )


def desk_weights_path():
    return CACHE / (f"weights_desk_{_kernels.backend_name()}_"
                    f"{DESK_ITERATIONS}_{DESK_SEED}.bin")


@pytest.fixture(scope="session")
def trained_net(priors, grid):
    """Desk-scale network; trained once and cached on disk."""
    path = desk_weights_path()
    if not path.exists():
        CACHE.mkdir(exist_ok=True)
        spec = TrainingSampleSpec.default(priors, grid)
        config = nn.TrainConfig(iterations=DESK_ITERATIONS, seed=DESK_SEED)
        started = time.time()
        params, _ = nn.train_sve(spec, priors, grid, nn.ArchitectureSpec(), config)
        (CACHE / "train_time.json").write_text(
            json.dumps({"seconds": time.time() - started}))
        fileio.save_weights(params, path)
    return fileio.load_weights(path)


def small_phantom_config(tumor_size=1):
    return PhantomConfig(n_voxels=16, radii=(7.6, 5.5, 3.2),
                         tumor_radius_vox=4.5, tumor_size=tumor_size)


@pytest.fixture(scope="session")
def small_dataset():
    """16x16 phantom dataset at water SNR 12.1."""
    return phantom_to_dmi(build_phantom(small_phantom_config()), 12.1, seed=7)


@pytest.fixture(scope="session")
def base_phantom():
    return build_phantom(PhantomConfig())


@pytest.fixture(scope="session")
def dataset121(base_phantom):
    """Default 32x32 phantom dataset at water SNR 12.1."""
    return phantom_to_dmi(base_phantom, 12.1, seed=21)


def cached_arrays(key, builder):
    """npz-disk-cached dict of arrays keyed by a content string."""
    CACHE.mkdir(exist_ok=True)
    path = CACHE / f"{key}.npz"
    if path.exists():
        with np.load(path) as data:
            return {name: data[name] for name in data.files}
    arrays = builder()
    np.savez_compressed(path, **arrays)
    return arrays
