import numpy as np
import pytest

from splatmap.core import CameraModel, Pose, rgb_to_sh_dc
from splatmap.gaussian_map import GaussianMap

# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_map(positions, colors=None, opacities=None, log_scales=None, rotations=None, degree=0) -> GaussianMap:
    """Small helper for hand-built maps; defaults to opaque-ish grey isotropic blobs."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    colors = np.full((n, 3), 0.5) if colors is None else np.asarray(colors, dtype=np.float64).reshape(n, 3)
    opac = np.full(n, 0.5) if opacities is None else np.asarray(opacities, dtype=np.float64).reshape(n)
    ls = np.full((n, 3), np.log(0.05)) if log_scales is None else np.asarray(log_scales).reshape(n, 3)
    rot = np.tile([1.0, 0, 0, 0], (n, 1)) if rotations is None else np.asarray(rotations).reshape(n, 4)
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = rgb_to_sh_dc(colors)
    gmap = GaussianMap()
    gmap.append(positions, rot, ls, np.log(opac / (1 - opac)), sh)
    gmap.active_degree = degree
    return gmap


@pytest.fixture
def cam64() -> CameraModel:
    return CameraModel(60.0, 60.0, 32.0, 32.0, 64, 64)


@pytest.fixture
def identity() -> Pose:
    return Pose.identity()


@pytest.fixture(scope="session")
def small_sequence(tmp_path_factory):
    """A short synthetic sequence shared by pipeline and CLI tests."""
    from splatmap.synthetic import SyntheticSpec, generate_synthetic_scene

    root = tmp_path_factory.mktemp("seq_small")
    scene = generate_synthetic_scene(SyntheticSpec(n_gaussians=500, n_frames=8, seed=3), root)
    return root, scene
