import numpy as np
import pytest

from dualreg.geometry import RigidTransform, euler_zyx_to_matrix


def random_transform(rng, max_deg=45.0, max_t=0.5):
    R = euler_zyx_to_matrix(rng.uniform(0.0, max_deg, 3))
    return RigidTransform(R, rng.uniform(-max_t, max_t, 3))


def random_rotation(rng):
    # uniform over SO(3) via a normalised quaternion
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains networks; several minutes")


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
