import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotation(rng, max_angle=np.pi):
    from atdn.geometry import axis_angle_to_matrix
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis_angle_to_matrix(axis * rng.uniform(0, max_angle))


def random_pose(rng, scale=5.0, max_angle=np.pi):
    from atdn.geometry import Pose
    return Pose(random_rotation(rng, max_angle), rng.normal(scale=scale, size=3))


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance(request):
    """Record one line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(label, ok, detail):
        line = f"criterion {label}: {'PASS' if ok else 'FAIL'} - {detail}"
        lines.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
