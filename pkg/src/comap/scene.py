"""Synthetic world: primitives, analytic RGB-D rendering and ground-truth surfaces.

Depth images store camera-z depth in meters (0 = miss); instance-id maps use
0 for background and 1-based indices into Scene.instances otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .geometry import Intrinsics, aabb_contains, invert_pose, pixel_rays

SPHERE = "sphere"
BOX = "box"
CYLINDER = "cylinder"
KINDS = (SPHERE, BOX, CYLINDER)

MIN_FEATURE_DIM = 8


@dataclass(frozen=True)
class Primitive:
    kind: str
    pose: np.ndarray          # 4x4 local-to-world
    size: np.ndarray          # sphere: (r,), box: full extents (sx,sy,sz), cylinder: (r, h)
    albedo: np.ndarray        # rgb in [0,1]
    class_id: int

    def local_aabb(self) -> np.ndarray:
        if self.kind == SPHERE:
            r = self.size[0]
            half = np.array([r, r, r])
        elif self.kind == BOX:
            half = self.size / 2.0
        elif self.kind == CYLINDER:
            r, h = self.size
            half = np.array([r, r, h / 2.0])
        else:
            raise ContractError(f"unknown primitive kind {self.kind!r}")
        return np.stack([-half, half])

    def world_aabb(self) -> np.ndarray:
        lo, hi = self.local_aabb()
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        world = corners @ self.pose[:3, :3].T + self.pose[:3, 3]
        return np.stack([world.min(axis=0), world.max(axis=0)])

    def area(self) -> float:
        if self.kind == SPHERE:
            return float(4.0 * np.pi * self.size[0] ** 2)
        if self.kind == BOX:
            sx, sy, sz = self.size
            return float(2.0 * (sx * sy + sy * sz + sx * sz))
        r, h = self.size
        return float(2.0 * np.pi * r * h + 2.0 * np.pi * r**2)


@dataclass
class Scene:
    instances: list[Primitive]
    bounds: np.ndarray                                 # (2, 3) world AABB
    feature_dim: int
    class_features: dict[int, tuple[np.ndarray, np.ndarray]]  # class_id -> (clip, caption)
    seed: int = 0

    def gt_features(self, instance_id: int) -> tuple[np.ndarray, np.ndarray]:
        """Ground-truth (clip, caption) features for a 1-based instance id."""
        prim = self.instances[instance_id - 1]
        return self.class_features[prim.class_id]

    def class_of(self, instance_id: int) -> int:
        return self.instances[instance_id - 1].class_id


@dataclass
class FrameBundle:
    agent_id: int
    t: int
    pose: np.ndarray            # 4x4 camera-to-world
    intrinsics: Intrinsics
    rgb: np.ndarray             # (H, W, 3) float64 in [0,1]
    depth: np.ndarray           # (H, W) float64 meters, 0 = miss
    gt_masks: np.ndarray        # (H, W) int32
    corrupted_masks: np.ndarray | None = None
    # aligned global-id map, filled by the alignment phase
    aligned_masks: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape  # (H, W)


def _sample_unit_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def build_scene(spec: dict, feature_dim: int = 32, seed: int = 0) -> Scene:
    """Construct the ground-truth world from a validated scene spec dict.

    Class features are unit vectors sampled once per class id; instances of the
    same class share them exactly. Deterministic for a fixed seed.
    """
    if feature_dim < MIN_FEATURE_DIM:
        raise ConfigError(f"feature_dim must be >= {MIN_FEATURE_DIM}, got {feature_dim}")
    prims_spec = spec.get("primitives", [])
    if not prims_spec:
        raise ConfigError("scene needs at least one primitive")
    bounds = np.asarray(spec["bounds"], dtype=np.float64)
    if bounds.shape != (2, 3) or np.any(bounds[1] <= bounds[0]):
        raise ConfigError("scene bounds must be a non-degenerate [[lo],[hi]] box")

    instances = []
    for idx, p in enumerate(prims_spec):
        prim = _primitive_from_spec(p, idx)
        if not aabb_contains(bounds, prim.world_aabb()):
            raise ConfigError(f"primitive {idx} ({prim.kind}) lies outside scene bounds")
        instances.append(prim)

    rng = np.random.default_rng(seed)
    class_features: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for class_id in sorted({p.class_id for p in instances}):
        clip = _sample_unit_vector(rng, feature_dim)
        caption = _sample_unit_vector(rng, feature_dim)
        class_features[class_id] = (clip, caption)

    return Scene(instances=instances, bounds=bounds, feature_dim=feature_dim,
                 class_features=class_features, seed=seed)


def _primitive_from_spec(p: dict, idx: int) -> Primitive:
    from .geometry import make_pose, rotation_xyz

    kind = p.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"primitive {idx}: unknown kind {kind!r}")
    center = np.asarray(p.get("center", [0.0, 0.0, 0.0]), dtype=np.float64)
    rotation = rotation_xyz(p.get("rotation_deg", (0.0, 0.0, 0.0)))
    if kind == SPHERE:
        size = np.array([float(p["radius"])])
    elif kind == BOX:
        size = np.asarray(p["size"], dtype=np.float64)
    else:
        size = np.array([float(p["radius"]), float(p["height"])])
    if np.any(size <= 0):
        raise ConfigError(f"primitive {idx}: non-positive size")
    albedo = np.asarray(p.get("albedo", [0.5, 0.5, 0.5]), dtype=np.float64)
    if albedo.shape != (3,) or np.any(albedo < 0) or np.any(albedo > 1):
        raise ConfigError(f"primitive {idx}: albedo must be rgb in [0,1]")
    return Primitive(kind=kind, pose=make_pose(rotation, center), size=size,
                     albedo=albedo, class_id=int(p.get("class_id", 1)))


# --- analytic ray casting ------------------------------------------------

def _intersect_sphere(origin, dirs, prim: Primitive) -> np.ndarray:
    center = prim.pose[:3, 3]
    r = prim.size[0]
    oc = origin - center
    a = np.einsum("...i,...i->...", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - r * r
    disc = b * b - 4.0 * a * c
    t = np.full(dirs.shape[:-1], np.inf)
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2.0 * a)
    t1 = (-b + sq) / (2.0 * a)
    near = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    t[hit] = near[hit]
    return t


def _intersect_box(origin, dirs, prim: Primitive) -> np.ndarray:
    inv = invert_pose(prim.pose)
    o = inv[:3, :3] @ origin + inv[:3, 3]
    d = dirs @ inv[:3, :3].T
    half = prim.size / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (-half - o) / d
        t_hi = (half - o) / d
    parallel = d == 0.0
    inside = (o >= -half) & (o <= half)
    t_min = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t_lo, t_hi))
    t_max = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t_lo, t_hi))
    t0 = t_min.max(axis=-1)
    t1 = t_max.min(axis=-1)
    t = np.where((t1 >= t0) & (t1 > 1e-9), np.where(t0 > 1e-9, t0, t1), np.inf)
    return t


def _intersect_cylinder(origin, dirs, prim: Primitive) -> np.ndarray:
    inv = invert_pose(prim.pose)
    o = inv[:3, :3] @ origin + inv[:3, 3]
    d = dirs @ inv[:3, :3].T
    r, h = prim.size
    zh = h / 2.0
    t = np.full(dirs.shape[:-1], np.inf)

    # lateral surface: quadratic in x, y
    a = d[..., 0] ** 2 + d[..., 1] ** 2
    b = 2.0 * (o[0] * d[..., 0] + o[1] * d[..., 1])
    c = o[0] ** 2 + o[1] ** 2 - r * r
    disc = b * b - 4.0 * a * c
    valid = (disc >= 0) & (a > 1e-14)
    sq = np.sqrt(np.where(valid, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        for sign in (-1.0, 1.0):
            ts = (-b + sign * sq) / (2.0 * a)
            z = o[2] + ts * d[..., 2]
            ok = valid & (ts > 1e-9) & (np.abs(z) <= zh)
            t = np.where(ok & (ts < t), ts, t)

    # caps at z = +-h/2
    with np.errstate(divide="ignore", invalid="ignore"):
        for z_cap in (-zh, zh):
            ts = (z_cap - o[2]) / d[..., 2]
            x = o[0] + ts * d[..., 0]
            y = o[1] + ts * d[..., 1]
            ok = (d[..., 2] != 0) & (ts > 1e-9) & (x * x + y * y <= r * r)
            t = np.where(ok & (ts < t), ts, t)
    return t


_INTERSECTORS = {SPHERE: _intersect_sphere, BOX: _intersect_box, CYLINDER: _intersect_cylinder}


def render_frame(
    scene: Scene,
    pose: np.ndarray,
    intrinsics: Intrinsics,
    resolution: tuple[int, int],
    agent_id: int = 0,
    t: int = 0,
    depth_noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> FrameBundle:
    """Cast one ray per pixel against every primitive; nearest hit wins.

    Shading is flat albedo. Optional Gaussian depth noise is applied to hit
    pixels only (never creates or destroys hits).
    """
    height, width = resolution
    if height < 16 or width < 16:
        raise ContractError("resolution must be at least 16x16")
    if abs(np.linalg.det(pose[:3, :3])) < 1e-9:
        raise ContractError("pose is not invertible")

    origin, dirs = pixel_rays(intrinsics, width, height, pose)
    depths = np.stack([_INTERSECTORS[p.kind](origin, dirs, p) for p in scene.instances])
    nearest = np.argmin(depths, axis=0)
    best = np.take_along_axis(depths, nearest[None], axis=0)[0]
    hit = np.isfinite(best)

    masks = np.where(hit, nearest + 1, 0).astype(np.int32)
    depth = np.where(hit, best, 0.0)
    albedos = np.stack([p.albedo for p in scene.instances])
    rgb = np.where(hit[..., None], albedos[nearest], 0.0)

    if depth_noise_sigma > 0.0:
        if rng is None:
            raise ContractError("depth noise requires an rng")
        noise = rng.normal(0.0, depth_noise_sigma, size=depth.shape)
        depth = np.where(hit, np.maximum(depth + noise, 1e-6), 0.0)

    return FrameBundle(agent_id=agent_id, t=t, pose=pose.copy(), intrinsics=intrinsics,
                       rgb=rgb, depth=depth, gt_masks=masks)


# --- ground-truth surface sampling ---------------------------------------

def sample_primitive_surface(prim: Primitive, density: float, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform world-space samples of a primitive's surface (points per m^2)."""
    n = max(int(np.ceil(prim.area() * density)), 16)
    if prim.kind == SPHERE:
        r = prim.size[0]
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        local = v * r
    elif prim.kind == BOX:
        sx, sy, sz = prim.size
        areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-0.5, 0.5, size=(n, 2))
        local = np.zeros((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -0.5, 0.5)
        other = np.array([[1, 2], [0, 2], [0, 1]])
        half = prim.size
        for ax in range(3):
            sel = axis == ax
            local[sel, ax] = sign[sel] * half[ax]
            o0, o1 = other[ax]
            local[sel, o0] = uv[sel, 0] * half[o0]
            local[sel, o1] = uv[sel, 1] * half[o1]
    else:
        r, h = prim.size
        side_area = 2.0 * np.pi * r * h
        cap_area = np.pi * r * r
        which = rng.choice(3, size=n, p=np.array([side_area, cap_area, cap_area]) / prim.area())
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        local = np.zeros((n, 3))
        side = which == 0
        local[side, 0] = r * np.cos(theta[side])
        local[side, 1] = r * np.sin(theta[side])
        local[side, 2] = rng.uniform(-h / 2.0, h / 2.0, size=side.sum())
        for cap_idx, z in ((1, -h / 2.0), (2, h / 2.0)):
            sel = which == cap_idx
            rad = r * np.sqrt(rng.uniform(0.0, 1.0, size=sel.sum()))
            local[sel, 0] = rad * np.cos(theta[sel])
            local[sel, 1] = rad * np.sin(theta[sel])
            local[sel, 2] = z
    return local @ prim.pose[:3, :3].T + prim.pose[:3, 3]


def sample_scene_surface(scene: Scene, density: float, seed: int):
    """Ground-truth surface cloud: (points, instance_ids, class_ids)."""
    rng = np.random.default_rng(seed)
    pts, iids, cids = [], [], []
    for idx, prim in enumerate(scene.instances):
        p = sample_primitive_surface(prim, density, rng)
        pts.append(p)
        iids.append(np.full(len(p), idx + 1, dtype=np.int32))
        cids.append(np.full(len(p), prim.class_id, dtype=np.int32))
    return np.concatenate(pts), np.concatenate(iids), np.concatenate(cids)
