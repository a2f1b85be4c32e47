import numpy as np
import pytest
from scipy import ndimage

from voxelforge.volume import IntensityDomain, Volume

ACCEPTANCE_RESULTS: dict[tuple[int, str], bool] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None and report.when == "call":
        ACCEPTANCE_RESULTS[(marker.args[0], marker.args[1])] = report.passed


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for (number, description), passed in sorted(ACCEPTANCE_RESULTS.items()):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {description}")


def unit_volume(voxels, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return Volume(
        voxels=np.asarray(voxels, dtype=np.float32),
        spacing=spacing,
        origin=np.asarray(origin, dtype=float),
        intensity_domain=IntensityDomain.UNIT,
    )


def raw_volume(voxels, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return Volume(
        voxels=np.asarray(voxels, dtype=np.uint16),
        spacing=spacing,
        origin=np.asarray(origin, dtype=float),
        intensity_domain=IntensityDomain.RAW16,
    )


def mask_volume(voxels, spacing=(1.0, 1.0, 1.0)):
    return Volume(
        voxels=np.asarray(voxels, dtype=np.uint8),
        spacing=spacing,
        intensity_domain=IntensityDomain.MASK,
    )


def smooth_blob_volume(size=64, seed=0, sigma=4.0, spacing=(1.0, 1.0, 1.0)):
    """Smoothed random blobs, tapered to zero near the faces.

    The radial taper guarantees that rigid motions within a few voxels do
    not move structure across the volume boundary.
    """
    rng = np.random.default_rng(seed)
    noise = rng.random((size, size, size))
    blobs = ndimage.gaussian_filter(noise, sigma)
    blobs -= blobs.min()
    peak = blobs.max()
    if peak > 0:
        blobs /= peak
    coords = np.indices((size, size, size), dtype=float)
    centre = (size - 1) / 2.0
    radius = np.sqrt(((coords - centre) ** 2).sum(axis=0))
    taper = np.clip((0.45 * size - radius) / (0.1 * size), 0.0, 1.0)
    return unit_volume((blobs * taper).astype(np.float32), spacing=spacing)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
