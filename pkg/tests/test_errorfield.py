import numpy as np
import pytest

from depthbench.errorfield import (VertexIndex3, aggregate,
                                   shape_precision, signed_error_frame,
                                   temporal_mean_cloud, write_heatmap_ppm,
                                   write_metrics_csv)
from depthbench.geom import RigidTransform
from depthbench.meshio import FrameSequence, TriangleMesh

from conftest import cloud_from_points, plane_mesh

# camera frame == organ frame; camera center at origin looking along +z
IDENTITY = RigidTransform.identity()


def plane_scene(spacing=0.01, extent=0.3, depth=0.16):
    """Planar mesh at z=depth in front of a camera at the origin."""
    mesh = plane_mesh(extent=extent, spacing=spacing, z=depth)
    return mesh, VertexIndex3(mesh)


def grid_cloud(width, height, z, span=0.05):
    # offset avoids cloud points landing exactly on mesh grid lines, where
    # the 3 nearest vertices tie and may be collinear
    xs = np.linspace(-span, span, width) + 0.0003
    ys = np.linspace(-span, span, height) + 0.0007
    xx, yy = np.meshgrid(xs, ys)
    pts = np.stack([xx, yy, np.full_like(xx, z)], axis=-1)
    return cloud_from_points(pts.reshape(-1, 3), width, height)


def test_sign_convention_toward_camera_positive():
    mesh, index = plane_scene()
    cloud = grid_cloud(8, 6, z=0.158)  # 2 mm closer to the camera
    field = signed_error_frame(cloud, IDENTITY, mesh, index)
    assert field.valid.all()
    assert np.abs(field.error - 0.002).max() <= 1e-9


def test_point_on_vertex_zero_error():
    mesh, index = plane_scene()
    v = mesh.vertices[57]
    cloud = cloud_from_points(v[None, :], 1, 1)
    field = signed_error_frame(cloud, IDENTITY, mesh, index)
    assert abs(field.error[0, 0]) <= 1e-9


def test_matches_analytic_plane_distance(rng):
    spacing = 0.005
    mesh, index = plane_scene(spacing=spacing)
    n = 500
    pts = np.column_stack([rng.uniform(-0.1, 0.1, (n, 2)),
                           rng.uniform(0.13, 0.159, n)])
    cloud = cloud_from_points(pts, n, 1)
    field = signed_error_frame(cloud, IDENTITY, mesh, index)
    analytic = 0.16 - pts[:, 2]  # distance to the plane, positive = closer
    assert np.abs(field.error[0] - analytic).max() <= spacing * 1e-3


@pytest.mark.parametrize("delta_mm", [-10.0, -5.0, -1.0, 1.0, 5.0, 10.0])
def test_displacement_recovered_exactly(delta_mm):
    mesh, index = plane_scene()
    cloud = grid_cloud(10, 10, z=0.16 - delta_mm / 1000.0)
    field = signed_error_frame(cloud, IDENTITY, mesh, index)
    assert np.abs(field.error - delta_mm / 1000.0).max() <= 1e-9


def test_three_nearest_match_brute_force(rng):
    verts = rng.uniform(-0.2, 0.2, (4000, 3))
    faces = np.arange(3999)[:, None] + np.array([[0, 1, 2]])
    mesh = TriangleMesh(verts, faces[: 1000])
    index = VertexIndex3(mesh)
    queries = rng.uniform(-0.22, 0.22, (10000, 3))
    _, idx = index.query3(queries)
    d2 = ((queries[:, None, :] - verts[None, :, :]) ** 2).sum(-1)
    brute = np.argsort(d2, axis=1)[:, :3]
    assert np.array_equal(np.sort(idx, axis=1), np.sort(brute, axis=1))


def test_degenerate_footprint_marks_pixel_invalid():
    # three collinear vertices clustered near the query; a fourth far away
    # forms the only (valid) face
    verts = np.array([[0.0, 0.0, 0.0], [1e-4, 0.0, 0.0], [2e-4, 0.0, 0.0],
                      [5.0, 5.0, 0.0]])
    mesh = TriangleMesh(verts, np.array([[0, 1, 3]]))
    index = VertexIndex3(mesh)
    cloud = cloud_from_points(np.array([[1e-4, 1e-5, 0.01]]), 1, 1)
    field = signed_error_frame(cloud, IDENTITY, mesh, index)
    assert not field.valid[0, 0]
    assert field.degenerate_pixels == 1


def test_boundary_pixels_reported():
    mesh, index = plane_scene(extent=0.04, spacing=0.01)
    edge = cloud_from_points(np.array([[-0.02, -0.02, 0.159]]), 1, 1)
    field = signed_error_frame(edge, IDENTITY, mesh, index)
    assert field.boundary_pixels == 1
    middle = cloud_from_points(np.array([[0.0, 0.0, 0.159]]), 1, 1)
    field = signed_error_frame(middle, IDENTITY, mesh, index)
    assert field.boundary_pixels == 0


def test_exact_face_matches_nearest3_on_plane(rng):
    mesh, index = plane_scene()
    pts = np.column_stack([rng.uniform(-0.1, 0.1, (200, 2)),
                           rng.uniform(0.14, 0.158, 200)])
    cloud = cloud_from_points(pts, 200, 1)
    a = signed_error_frame(cloud, IDENTITY, mesh, index)
    b = signed_error_frame(cloud, IDENTITY, mesh, index, exact_face=True)
    assert b.valid.all()
    assert np.abs(a.error - b.error).max() <= 1e-9


def test_exact_face_distance_off_surface_edge():
    # point beyond the mesh border: exact mode reports the true distance to
    # the nearest triangle, not a projection onto its infinite plane
    mesh = TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0],
                                  [1, 1, 0]]),
                        np.array([[0, 1, 2], [1, 3, 2]]))
    index = VertexIndex3(mesh)
    cloud = cloud_from_points(np.array([[-0.3, -0.4, 0.2]]), 1, 1)
    t_co = RigidTransform(np.eye(3), np.array([0.0, 0.0, 1.0]))  # camera above
    field = signed_error_frame(cloud, t_co, mesh, index, exact_face=True)
    # closest point is the corner (0,0,0); cloud point maps to (-0.3,-0.4,1.2)
    expected = np.sqrt(0.3 ** 2 + 0.4 ** 2 + 1.2 ** 2)
    assert abs(field.error[0, 0] - expected) <= 1e-12


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def make_sequence(clouds):
    return FrameSequence(list(clouds), camera_id="t")


def test_identical_frames_zero_sd():
    mesh, index = plane_scene()
    cloud = grid_cloud(6, 5, z=0.157)
    fields = aggregate(make_sequence([cloud] * 4), IDENTITY, mesh, index)
    assert fields.valid.all()
    assert np.abs(fields.sd).max() == 0.0
    assert np.abs(fields.mean - 0.003).max() <= 1e-9


def test_aggregate_requires_two_frames():
    mesh, index = plane_scene()
    with pytest.raises(ValueError, match="2 frames"):
        aggregate(make_sequence([grid_cloud(2, 2, 0.15)]), IDENTITY,
                  mesh, index)


def test_gaussian_noise_sd_recovered(rng):
    mesh, index = plane_scene()
    w, h, n = 24, 18, 125
    sigma = 0.0005
    base = grid_cloud(w, h, z=0.155)
    clouds = []
    for f in range(n):
        pts = base.points.copy().astype(np.float64)
        pts[..., 2] += rng.normal(0, sigma, (h, w))
        clouds.append(cloud_from_points(pts.reshape(-1, 3), w, h,
                                        timestamp=f / 30))
    fields = aggregate(make_sequence(clouds), IDENTITY, mesh, index)
    # per-pixel sample SD of z-noise equals the signed-error SD exactly
    assert abs(fields.sd[fields.valid].mean() - sigma) <= 0.05e-3


def test_constant_shift_moves_mean_not_shifted_ae():
    mesh, index = plane_scene()
    rng = np.random.default_rng(3)
    w, h = 12, 9
    base_z = 0.16 - rng.uniform(0, 0.004, (h, w))  # structured scene errors
    seq_a = []
    seq_b = []
    for f in range(5):
        seq_a.append(cloud_from_points(
            np.stack(np.broadcast_arrays(
                *np.meshgrid(np.linspace(-0.05, 0.05, w),
                             np.linspace(-0.05, 0.05, h)),
                base_z), axis=-1).reshape(-1, 3), w, h))
        seq_b.append(cloud_from_points(
            np.stack(np.broadcast_arrays(
                *np.meshgrid(np.linspace(-0.05, 0.05, w),
                             np.linspace(-0.05, 0.05, h)),
                base_z - 0.003), axis=-1).reshape(-1, 3), w, h))
    fa = aggregate(make_sequence(seq_a), IDENTITY, mesh, index)
    fb = aggregate(make_sequence(seq_b), IDENTITY, mesh, index)
    assert np.abs((fb.mean - fa.mean)[fa.valid] - 0.003).max() <= 1e-9
    assert np.abs(fb.shifted_ae - fa.shifted_ae).max() <= 1e-12


def test_mean_matches_independent_per_frame_means(rng):
    mesh, index = plane_scene()
    w, h = 10, 8
    clouds = []
    for f in range(7):
        pts = grid_cloud(w, h, z=0.15).points.astype(np.float64)
        pts[..., 2] += rng.normal(0, 1e-3, (h, w))
        clouds.append(cloud_from_points(pts.reshape(-1, 3), w, h))
    seq = make_sequence(clouds)
    fields = aggregate(seq, IDENTITY, mesh, index)
    per_frame = [signed_error_frame(c, IDENTITY, mesh, index).error
                 for c in clouds]
    direct = np.mean(per_frame, axis=0)
    assert np.abs(fields.mean - direct)[fields.valid].max() <= 1e-12


def test_half_support_rule(rng):
    mesh, index = plane_scene()
    w, h, n = 4, 3, 8
    clouds = []
    for f in range(n):
        valid = np.ones((h, w), bool)
        if f >= 3:
            valid[0, 0] = False   # pixel (0,0) valid in 3/8 frames -> dropped
        if f >= 4:
            valid[0, 1] = False   # pixel (0,1) valid in 4/8 frames -> kept
        pts = grid_cloud(w, h, z=0.15).points
        clouds.append(cloud_from_points(pts.reshape(-1, 3), w, h, valid=valid))
    fields = aggregate(make_sequence(clouds), IDENTITY, mesh, index)
    assert not fields.valid[0, 0]
    assert fields.valid[0, 1]
    assert fields.support[0, 1] == 4


def test_aggregate_empty_field_rejected():
    mesh, index = plane_scene()
    w, h = 2, 2
    invalid = np.zeros((h, w), bool)
    clouds = [cloud_from_points(grid_cloud(w, h, 0.15).points.reshape(-1, 3),
                                w, h, valid=invalid) for _ in range(3)]
    with pytest.raises(ValueError, match="empty field"):
        aggregate(make_sequence(clouds), IDENTITY, mesh, index)


def test_threaded_aggregation_matches_sequential(rng):
    mesh, index = plane_scene()
    w, h = 16, 12
    clouds = []
    for f in range(6):
        pts = grid_cloud(w, h, z=0.15).points.astype(np.float64)
        pts[..., 2] += rng.normal(0, 1e-3, (h, w))
        clouds.append(cloud_from_points(pts.reshape(-1, 3), w, h))
    seq = make_sequence(clouds)
    a = aggregate(seq, IDENTITY, mesh, index, threads=1)
    b = aggregate(seq, IDENTITY, mesh, index, threads=4)
    assert np.array_equal(a.mean, b.mean)
    assert np.array_equal(a.sd, b.sd)


def test_shape_precision_shift_invariance(rng):
    mean = rng.normal(0, 0.002, (20, 30))
    valid = rng.random((20, 30)) < 0.8
    a = shape_precision(mean, valid)
    b = shape_precision(mean + 0.0123, valid)
    assert np.abs(a - b).max() <= 1e-12


# ---------------------------------------------------------------------------
# temporal mean cloud
# ---------------------------------------------------------------------------

def test_temporal_mean_constant_sequence():
    cloud = grid_cloud(5, 4, z=0.15)
    out = temporal_mean_cloud(make_sequence([cloud, cloud, cloud]))
    assert np.abs(out.points - cloud.points).max() <= 1e-15
    assert out.valid.all()


def test_temporal_mean_two_frame_midpoint():
    a = grid_cloud(3, 3, z=0.15)
    b_pts = a.points.copy()
    b_pts[1, 1, 2] += 0.004
    b = cloud_from_points(b_pts.reshape(-1, 3), 3, 3)
    out = temporal_mean_cloud(make_sequence([a, b]))
    assert abs(out.points[1, 1, 2] - 0.152) <= 1e-12


def test_temporal_mean_matches_brute_force(rng):
    w, h, n = 6, 5, 9
    clouds = []
    for f in range(n):
        pts = np.column_stack([rng.uniform(-0.1, 0.1, (w * h, 2)),
                               rng.uniform(0.1, 0.2, w * h)])
        valid = rng.random((h, w)) < 0.7
        clouds.append(cloud_from_points(pts, w, h, valid=valid))
    out = temporal_mean_cloud(make_sequence(clouds))
    for y in range(h):
        for x in range(w):
            samples = [c.points[y, x].astype(np.float64)
                       for c in clouds if c.valid[y, x]]
            retained = 2 * len(samples) >= n and len(samples) > 0
            assert out.valid[y, x] == retained
            if retained:
                assert np.abs(out.points[y, x]
                              - np.mean(samples, axis=0)).max() <= 1e-12


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def test_metrics_csv_export(tmp_path):
    mesh, index = plane_scene()
    fields = aggregate(make_sequence([grid_cloud(4, 3, 0.158)] * 2),
                       IDENTITY, mesh, index)
    path = tmp_path / "m.csv"
    write_metrics_csv(fields, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "px,py,mean,sd,shifted_ae"
    assert len(lines) == 1 + 12
    px, py, mean, sd, sae = lines[1].split(",")
    assert (px, py) == ("0", "0")
    assert abs(float(mean) - 0.002) <= 1e-9


def test_heatmap_ppm_colors(tmp_path):
    values = np.array([[0.01, -0.01, 0.0]])
    valid = np.array([[True, True, False]])
    path = tmp_path / "h.ppm"
    write_heatmap_ppm(values, valid, path, range_m=0.01)
    data = path.read_bytes()
    assert data.startswith(b"P6\n3 1\n255\n")
    px = np.frombuffer(data[-9:], np.uint8).reshape(3, 3)
    assert tuple(px[0]) == (255, 0, 0)    # +range = red
    assert tuple(px[1]) == (0, 0, 255)    # -range = blue
    assert tuple(px[2]) == (0, 0, 0)      # invalid = black
