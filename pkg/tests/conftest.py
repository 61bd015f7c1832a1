import numpy as np
import pytest

from depthbench.geom import RigidTransform, axis_angle_matrix
from depthbench.meshio import OrganizedCloud, TriangleMesh


def random_rotation(rng) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_transform(rng, scale: float = 1.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng),
                          rng.uniform(-scale, scale, 3))


def plane_mesh(extent=0.3, spacing=0.01, z=0.0) -> TriangleMesh:
    """Regular triangulated grid in the z=`z` plane, centered on origin."""
    n = int(round(extent / spacing)) + 1
    xs = np.linspace(-extent / 2, extent / 2, n)
    xx, yy = np.meshgrid(xs, xs)
    vertices = np.column_stack([xx.ravel(), yy.ravel(),
                                np.full(n * n, float(z))])
    idx = np.arange(n * n).reshape(n, n)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, :-1].ravel()
    d = idx[1:, 1:].ravel()
    faces = np.concatenate([np.column_stack([a, b, d]),
                            np.column_stack([a, d, c])])
    return TriangleMesh(vertices, faces)


def cloud_from_points(points, width, height, valid=None,
                      timestamp=0.0) -> OrganizedCloud:
    """Organized cloud from an (H*W, 3) camera-frame point array."""
    pts = np.asarray(points, np.float64).reshape(height, width, 3)
    if valid is None:
        valid = np.ones((height, width), bool)
    return OrganizedCloud(width, height, pts,
                          np.zeros((height, width, 3), np.uint8),
                          np.asarray(valid, bool).reshape(height, width),
                          timestamp)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rot_z(angle: float) -> np.ndarray:
    return axis_angle_matrix([0.0, 0.0, 1.0], angle)
