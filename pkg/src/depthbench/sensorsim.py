"""Synthetic ground-truth scenes and a depth-camera simulator.

The simulator renders organized clouds of a generated surface through a
pinhole model with injectable error sources, so every number the
evaluation pipeline produces can be checked against what was injected:

- per-material depth bias, configured in signed-error meters (negative
  bias = point measured as more distant from the camera),
- smooth cosine "blob" displacements around surface points (local hills
  or holes),
- per-frame Gaussian range noise, optionally depth-dependent
  (sigma = base + per_meter * z) and scaled by an illumination factor.

Rendering is deterministic per (spec, seed); frame f draws its noise
from an RNG seeded with (seed, f).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geom import RigidTransform, apply, inverse
from .meshio import (LABEL_INLIER, LABEL_OUTLIER, CorrespondenceSet,
                     FrameSequence, OrganizedCloud, TriangleMesh)
from .raycast import Bvh, build_bvh

MIN_VISIBLE_PINS = 4
PIN_OCCLUSION_TOL = 1e-3  # meters, pins sit on the surface


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole intrinsics plus the camera-to-organ pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @staticmethod
    def top_down(distance: float, fx: float, fy: float,
                 width: int, height: int) -> "PinholeCamera":
        """Camera on the +z axis at `distance`, looking straight down at
        the z=0 plane (image x along +x, image y along -y)."""
        rot = np.diag([1.0, -1.0, -1.0])
        pose = RigidTransform(rot, np.array([0.0, 0.0, distance]))
        return PinholeCamera(fx, fy, width / 2.0, height / 2.0,
                             width, height, pose)

    def ray_grid(self) -> np.ndarray:
        """Unit ray directions through pixel centers, camera frame,
        shape (H*W, 3) row-major."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        uu, vv = np.meshgrid(u, v)
        d = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class Blob:
    """Smooth cosine displacement around a surface point. Positive
    sign*amplitude reads as a positive signed error (a local hill)."""

    center: np.ndarray   # (3,) organ frame
    radius: float
    amplitude: float
    sign: int = 1

    def __post_init__(self):
        self.center = np.asarray(self.center, np.float64).reshape(3)
        if self.radius <= 0:
            raise ValueError("blob radius must be positive")


@dataclass
class NoiseModel:
    sigma_base: float = 0.0
    sigma_per_meter: float = 0.0
    material_bias: dict = field(default_factory=dict)  # id -> meters
    blobs: list = field(default_factory=list)
    illumination: float = 1.0

    def __post_init__(self):
        if self.sigma_base < 0 or self.sigma_per_meter < 0:
            raise ValueError("sigma terms must be non-negative")

    def sigma_at(self, z) -> np.ndarray:
        return (self.sigma_base + self.sigma_per_meter * np.asarray(z)) \
            * self.illumination

    def bias_table(self) -> np.ndarray:
        table = np.zeros(256)
        for mid, bias in self.material_bias.items():
            table[int(mid)] = bias
        return table

    @staticmethod
    def from_dict(d: dict, base: "NoiseModel" = None) -> "NoiseModel":
        cur = {} if base is None else {
            "sigma_base": base.sigma_base,
            "sigma_per_meter": base.sigma_per_meter,
            "material_bias": dict(base.material_bias),
            "blobs": list(base.blobs),
            "illumination": base.illumination,
        }
        for key in ("sigma_base", "sigma_per_meter", "illumination"):
            if key in d:
                cur[key] = float(d[key])
        if "material_bias" in d:
            cur["material_bias"] = {int(k): float(v)
                                    for k, v in d["material_bias"].items()}
        if "blobs" in d:
            cur["blobs"] = [Blob(b["center"], float(b["radius"]),
                                 float(b["amplitude"]), int(b.get("sign", 1)))
                            for b in d["blobs"]]
        return NoiseModel(**cur)


class SceneSpec:
    """Scene configuration loaded from JSON (see README for the schema)."""

    def __init__(self, data: dict):
        self.mesh_params = dict(data.get("mesh", {}))
        self.mesh_params.setdefault("kind", "plane")
        self.mesh_params.setdefault("extent", [0.3, 0.3])
        self.mesh_params.setdefault("spacing", 0.002)
        if float(self.mesh_params["spacing"]) <= 0:
            raise ValueError("mesh spacing must be positive")
        self.regions = list(data.get("regions", []))
        self.pins = dict(data.get("pins", {"count": 24}))
        self.cameras = dict(data.get("cameras", {
            "far": {"distance": 0.16},
            "close": {"distance": 0.08},
        }))
        self.base_noise = NoiseModel.from_dict(data.get("noise", {}))
        self.frames = int(data.get("frames", 125))
        self.fps = float(data.get("fps", 30.0))
        self.conditions = list(data.get("conditions", []))
        if self.frames < 1:
            raise ValueError("frames must be >= 1")

    @staticmethod
    def from_json(path) -> "SceneSpec":
        with open(path) as fh:
            return SceneSpec(json.load(fh))

    def camera(self, name: str) -> PinholeCamera:
        if name not in self.cameras:
            raise ValueError(f"unknown camera {name!r}")
        c = self.cameras[name]
        width = int(c.get("width", 640))
        height = int(c.get("height", 360))
        fx = float(c.get("fx", 700.0))
        fy = float(c.get("fy", fx))
        if "distance" in c:
            cam = PinholeCamera.top_down(float(c["distance"]), fx, fy,
                                         width, height)
        else:
            pose = RigidTransform.from_matrix(
                np.asarray(c["pose"], np.float64).reshape(4, 4))
            cam = PinholeCamera(fx, fy, float(c.get("cx", width / 2.0)),
                                float(c.get("cy", height / 2.0)),
                                width, height, pose)
        return cam

    def condition_noise(self, cond: dict) -> NoiseModel:
        return NoiseModel.from_dict(cond.get("noise", {}), self.base_noise)


class _HeightField:
    """Seeded smooth bump field over the xy plane, scaled so the sampled
    maximum absolute height equals the configured amplitude."""

    def __init__(self, params: dict, seed: int):
        self.kind = params["kind"]
        self.extent = np.asarray(params["extent"], np.float64)
        self.amplitude = float(params.get("bump_amplitude", 0.0))
        count = int(params.get("bump_count", 6))
        self.scale = 0.0
        if self.kind == "plane" or self.amplitude == 0.0 or count == 0:
            self.centers = np.zeros((0, 2))
            self.radii = np.zeros(0)
            self.amps = np.zeros(0)
            return
        if self.kind != "heightfield":
            raise ValueError(f"unknown mesh kind {params['kind']!r}")
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5ced)))
        self.centers = rng.uniform(-0.4, 0.4, (count, 2)) * self.extent
        self.radii = rng.uniform(0.15, 0.35, count) * float(min(self.extent))
        self.amps = rng.uniform(0.5, 1.0, count) * rng.choice([-1.0, 1.0], count)
        self.scale = 1.0

    def raw(self, xy: np.ndarray) -> np.ndarray:
        z = np.zeros(len(xy))
        for c, r, a in zip(self.centers, self.radii, self.amps):
            d = np.linalg.norm(xy - c, axis=1)
            inside = d < r
            z[inside] += a * 0.5 * (1.0 + np.cos(np.pi * d[inside] / r))
        return z

    def calibrate(self, grid_xy: np.ndarray) -> None:
        if self.scale == 0.0:
            return
        peak = np.max(np.abs(self.raw(grid_xy)))
        self.scale = self.amplitude / peak if peak > 0 else 0.0

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        if self.scale == 0.0:
            return np.zeros(len(xy))
        return self.scale * self.raw(xy)


def _paint_regions(xy: np.ndarray, regions: list,
                   labels: np.ndarray, materials: np.ndarray) -> None:
    for i, reg in enumerate(regions):
        shape = reg.get("shape")
        if shape == "halfplane":
            axis = {"x": 0, "y": 1}[reg.get("axis", "x")]
            sel = xy[:, axis] >= float(reg["min"])
        elif shape == "rect":
            lo = np.asarray(reg["min"], np.float64)
            hi = np.asarray(reg["max"], np.float64)
            sel = np.all((xy >= lo) & (xy <= hi), axis=1)
        elif shape == "disk":
            c = np.asarray(reg["center"], np.float64)
            sel = np.linalg.norm(xy - c, axis=1) <= float(reg["radius"])
        else:
            raise ValueError(f"region {i}: unknown shape {shape!r}")
        if "material" in reg:
            materials[sel] = int(reg["material"])
        if "label" in reg:
            lab = reg["label"]
            if lab not in ("inlier", "outlier"):
                raise ValueError(f"region {i}: label must be inlier/outlier")
            labels[sel] = LABEL_INLIER if lab == "inlier" else LABEL_OUTLIER


def generate_scene(spec: SceneSpec, seed: int
                   ) -> tuple[TriangleMesh, CorrespondenceSet]:
    """Deterministic ground-truth mesh plus the pin template.

    The returned correspondence set holds the pins' ground-truth
    positions on both sides; render_pin_observations replaces the
    camera side with observed (possibly noisy) camera-frame points.
    """
    p = spec.mesh_params
    ex, ey = (float(v) for v in p["extent"])
    sp = float(p["spacing"])
    nx = int(round(ex / sp)) + 1
    ny = int(round(ey / sp)) + 1
    xs = np.linspace(-ex / 2.0, ex / 2.0, nx)
    ys = np.linspace(-ey / 2.0, ey / 2.0, ny)
    xx, yy = np.meshgrid(xs, ys)
    xy = np.column_stack([xx.ravel(), yy.ravel()])

    height = _HeightField(p, seed)
    height.calibrate(xy)
    z = height(xy)
    vertices = np.column_stack([xy, z])

    idx = np.arange(nx * ny).reshape(ny, nx)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, :-1].ravel()
    d = idx[1:, 1:].ravel()
    faces = np.concatenate([np.column_stack([a, b, d]),
                            np.column_stack([a, d, c])]).astype(np.int64)

    labels = np.full(len(vertices), LABEL_INLIER, np.uint8)
    materials = np.zeros(len(vertices), np.uint8)
    _paint_regions(xy, spec.regions, labels, materials)
    colors = np.clip(150 + 30 * materials.astype(np.int64), 0, 255)
    colors = np.repeat(colors[:, None], 3, axis=1).astype(np.uint8)

    if "positions" in spec.pins:
        pin_xy = np.asarray(spec.pins["positions"], np.float64).reshape(-1, 2)
    else:
        count = int(spec.pins.get("count", 24))
        margin = float(spec.pins.get("margin", 0.1 * min(ex, ey)))
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9145)))
        pin_xy = rng.uniform([-ex / 2 + margin, -ey / 2 + margin],
                             [ex / 2 - margin, ey / 2 - margin], (count, 2))
    pin_pts = np.column_stack([pin_xy, height(pin_xy)])
    pins = CorrespondenceSet(np.arange(1, len(pin_pts) + 1),
                             pin_pts, pin_pts.copy())
    mesh = TriangleMesh(vertices, faces, colors, labels, materials)
    return mesh, pins


def render_depth(mesh: TriangleMesh, camera: PinholeCamera,
                 noise: NoiseModel, n_frames: int, seed: int,
                 bvh: Bvh = None, t0: float = 0.0, fps: float = 30.0,
                 camera_id: str = "cam", conditions: dict = None
                 ) -> FrameSequence:
    """Render n static frames of the mesh as organized clouds.

    Per pixel: a ray through the pixel center is intersected with the
    mesh (nearest hit); the range is displaced by the material bias and
    blob displacements (positive = measured closer), then per-frame
    Gaussian range noise is added; the result is back-projected to a
    camera-frame point. Rays that miss produce invalid pixels.
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if bvh is None:
        bvh = build_bvh(mesh.vertices, mesh.faces)
    h, w = camera.height, camera.width
    dirs_cam = camera.ray_grid()
    rot = camera.pose.rotation
    origin = camera.pose.translation
    dirs_org = dirs_cam @ rot.T
    t, tri, bu, bv = bvh.raycast(origin, dirs_org)
    hit = np.isfinite(t)
    if not hit.any():
        raise ValueError("camera sees no part of the mesh")

    displaced = t.copy()
    colors = np.zeros((h * w, 3), np.uint8)
    if hit.any():
        bary = np.column_stack([1.0 - bu[hit] - bv[hit], bu[hit], bv[hit]])
        corner = np.argmax(bary, axis=1)
        vid = mesh.faces[tri[hit], corner]
        displaced[hit] -= noise.bias_table()[mesh.materials[vid]]
        colors[hit] = mesh.colors[vid] if mesh.colors is not None else 170
        if noise.blobs:
            hits = origin + t[hit, None] * dirs_org[hit]
            disp = np.zeros(hits.shape[0])
            for blob in noise.blobs:
                d = np.linalg.norm(hits - blob.center, axis=1)
                inside = d < blob.radius
                disp[inside] += blob.sign * blob.amplitude * 0.5 * (
                    1.0 + np.cos(np.pi * d[inside] / blob.radius))
            displaced[hit] -= disp

    z_true = np.where(hit, t * dirs_cam[:, 2], 0.0)
    sigma = np.where(hit, noise.sigma_at(z_true), 0.0)
    frames = []
    for f in range(n_frames):
        rng = np.random.default_rng(np.random.SeedSequence((seed, f)))
        eps = rng.standard_normal(h * w) * sigma
        t_f = displaced - eps
        ok = hit & (t_f > 1e-6)
        pts = np.where(ok[:, None], dirs_cam * t_f[:, None], 0.0)
        frames.append(OrganizedCloud(
            w, h,
            pts.reshape(h, w, 3),
            np.where(ok[:, None], colors, 0).reshape(h, w, 3).astype(np.uint8),
            ok.reshape(h, w),
            t0 + f / fps,
        ))
    return FrameSequence(frames, camera_id=camera_id,
                         conditions=dict(conditions or {}))


def render_pin_observations(mesh: TriangleMesh, camera: PinholeCamera,
                            noise: NoiseModel, pins: CorrespondenceSet,
                            seed: int = 0, bvh: Bvh = None
                            ) -> CorrespondenceSet:
    """Observe the visible pins in the camera frame.

    A pin is visible when it projects inside the image with positive
    depth and no mesh surface occludes it. Observations carry isotropic
    Gaussian noise with the model's sigma at the pin depth. Fewer than
    4 visible pins is an error.
    """
    if bvh is None:
        bvh = build_bvh(mesh.vertices, mesh.faces)
    cam_pts = apply(inverse(camera.pose), pins.organ_points)
    z = cam_pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * cam_pts[:, 0] / z + camera.cx
        v = camera.fy * cam_pts[:, 1] / z + camera.cy
    visible = (z > 1e-6) & (u >= 0) & (u < camera.width) \
        & (v >= 0) & (v < camera.height)
    if visible.any():
        origin = camera.pose.translation
        rel = pins.organ_points[visible] - origin
        dist = np.linalg.norm(rel, axis=1)
        t_hit, _, _, _ = bvh.raycast(origin, rel / dist[:, None])
        visible[np.nonzero(visible)[0]] = t_hit >= dist - PIN_OCCLUSION_TOL
    n_vis = int(visible.sum())
    if n_vis < MIN_VISIBLE_PINS:
        raise ValueError(f"only {n_vis} of {len(pins)} pins visible; "
                         f"need at least {MIN_VISIBLE_PINS}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9175)))
    sigma = noise.sigma_at(z[visible])
    obs = cam_pts[visible] + rng.standard_normal((n_vis, 3)) * sigma[:, None]
    return CorrespondenceSet(pins.pin_ids[visible],
                             pins.organ_points[visible], obs)
