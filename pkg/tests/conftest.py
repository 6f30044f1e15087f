import numpy as np
import pytest

from rangepdm.cloud_io import PointCloud, SensorSpec
from rangepdm.synth import generate, random_scene


@pytest.fixture
def rng():
    return np.random.default_rng(123)


@pytest.fixture(scope="session")
def small_spec():
    return SensorSpec(16, 256, 272)


@pytest.fixture(scope="session")
def small_scan(small_spec):
    return generate(random_scene(small_spec, seed=11, collision_boost=2, wall_radius=20))


@pytest.fixture(scope="session")
def two_class_scan():
    spec = SensorSpec(16, 256, 256)
    scene = random_scene(spec, seed=123, two_class=True, collision_boost=3,
                         n_boxes=6, n_poles=20, wall_radius=20)
    return spec, generate(scene).cloud


def cloud_from(xyz, ring=None, labels=None, instances=None, intensity=None):
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if intensity is None:
        intensity = np.zeros(xyz.shape[0])
    return PointCloud(xyz=xyz, intensity=intensity, ring=ring, labels=labels, instances=instances)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
