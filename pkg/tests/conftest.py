import numpy as np
import pytest
from PIL import Image

from geco import data


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    """Small synthetic dataset shared by unit tests (60 pairs, 32px)."""
    out = tmp_path_factory.mktemp("toy")
    data.synth_toy_dataset(60, 32, 1234, out)
    return out


@pytest.fixture(scope="session")
def toy_manifest(toy_dir):
    return data.load_manifest(toy_dir / "manifest.csv")


@pytest.fixture()
def png_file(tmp_path):
    """Factory writing small RGB rasters; returns the written path."""

    def write(name: str, array: np.ndarray, fmt: str = "PNG"):
        path = tmp_path / name
        Image.fromarray(array.astype(np.uint8)).save(path, format=fmt)
        return path

    return write
