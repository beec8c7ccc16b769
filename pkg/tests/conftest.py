import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from forestreg.core import RigidTransform

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation from a random unit quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_transform(rng: np.random.Generator, scale: float = 10.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.uniform(-scale, scale, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def stem_positions(rng: np.random.Generator, n: int, extent: float = 30.0, min_spacing: float = 1.5,
                   z_sigma: float = 0.2) -> np.ndarray:
    """``n`` stem bases spread uniformly with a minimum horizontal spacing."""
    out = []
    while len(out) < n:
        p = rng.uniform(0, extent, 2)
        if all(np.hypot(*(p - q[:2])) >= min_spacing for q in out):
            out.append(np.array([p[0], p[1], rng.normal(0, z_sigma)]))
    return np.array(out)


def random_heading_transform(rng: np.random.Generator, max_tilt_deg: float = 0.0,
                             scale: float = 30.0) -> RigidTransform:
    """Random heading and translation, optionally tilted by up to ``max_tilt_deg``."""
    yaw = rng.uniform(-np.pi, np.pi)
    T = RigidTransform.about_z(yaw, rng.uniform(-scale, scale, 3))
    if max_tilt_deg > 0:
        axis = np.array([*rng.normal(size=2), 0.0])
        axis /= np.linalg.norm(axis)
        a = np.radians(rng.uniform(0, max_tilt_deg))
        K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        tilt = np.eye(3) + np.sin(a) * K + (1 - np.cos(a)) * K @ K
        T = RigidTransform(tilt @ T.rotation, T.translation)
    return T


def run_cli(*args, cwd=None):
    """Run the command line tool in a fresh interpreter; returns the completed process."""
    import subprocess
    import sys

    return subprocess.run([sys.executable, "-m", "forestreg.cli", *map(str, args)], cwd=cwd,
                          capture_output=True, text=True)


CLI_SPEC = ("stem_count=40\nextent_x=20\nextent_y=20\nnoise_sigma=0.01\nseed=3\n"
            "yaw_deg=30\ntx=5\nty=-3\ntz=0.2\noverlap=0.8\n")


ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
