"""Shared fixtures: tiny synthetic datasets and deterministic rngs."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from kdseg.data.dataset import SegmentationDataset
from kdseg.data.synthetic import synth_generate


class FakeRng:
    """Stand-in rng whose random() draws come from a fixed queue."""

    def __init__(self, draws):
        self.draws = list(draws)

    def random(self):
        return self.draws.pop(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def torch_rng():
    gen = torch.Generator()
    gen.manual_seed(1234)
    return gen


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    """Six synthetic subjects at 32 cubed, shared across the session."""
    root = tmp_path_factory.mktemp("tinydata") / "synth"
    synth_generate(6, 32, seed=11, out_dir=root)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_data_dir):
    """Dataset over the tiny corpus at native resolution (no subsampling)."""
    return SegmentationDataset(
        tiny_data_dir, crop_size=(32, 32, 32), subsample_factor=1
    )
