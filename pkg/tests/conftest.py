"""Shared fixtures for the end-to-end acceptance checks.

The phantom dataset and the model trained on it are expensive (minutes), so
they are built once per session and shared by every test that needs them.
"""

import pytest

from voxcnn.models import build_model
from voxcnn.presets import arch_preset, train_preset
from voxcnn.training import SplitPlan, train
from voxcnn.volumes import PhantomParams, VolumeDataset, generate_phantoms


@pytest.fixture(scope="session")
def phantom_root(tmp_path_factory):
    """600-sample phantom dataset (200/class) with default parameters."""
    root = tmp_path_factory.mktemp("phantoms")
    generate_phantoms(PhantomParams(), root)
    return root


@pytest.fixture(scope="session")
def phantom_dataset(phantom_root):
    return VolumeDataset.from_manifest(str(phantom_root / "manifest.vman"))


@pytest.fixture(scope="session")
def phantom_split(phantom_dataset):
    return SplitPlan(
        train_ids=phantom_dataset.split_ids("train"),
        val_ids=phantom_dataset.split_ids("val"),
        test_ids=phantom_dataset.split_ids("test"),
    )


@pytest.fixture(scope="session")
def phantom_model(phantom_dataset, phantom_split):
    """Toy AlexNet3D trained 30 epochs on the phantom training split."""
    config = train_preset("phantom-toy")
    model = build_model(arch_preset("alexnet3d-toy"), seed=config.seed)
    model, history = train(model, phantom_dataset, phantom_split, config)
    return model, history
