"""Parametric truss/world construction and deterministic LiDAR simulation.

Scans are produced by an analytic raycaster: rays are laid out on the
sensor's elevation/azimuth grid, intersected with every scene solid (with
conservative angular culling as a broad phase) and the nearest surface wins.
Points are stored in the sensor frame; the ground-truth label of each point
is the label of the face its noiseless ray hit.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidBoundsError, InvalidSpecError
from .geom import LabeledCloud, Pose, quat_to_matrix, random_unit_quaternion
from .primitives import (
    Ellipsoid,
    HeightFieldGround,
    OrientedBox,
    Scene,
    VerticalCylinder,
    intersect_solid,
    ray_ground,
)

FIXED_ORIENTATION_MODE = "fixed_position_random_orientation"
WITHIN_STRUCTURE_MODE = "random_within_structure"


@dataclass(frozen=True)
class SensorConfig:
    """Spinning LiDAR model (defaults follow a 128-channel Ouster OS1)."""

    v_resolution: int = 128
    h_resolution: int = 512
    min_range: float = 0.05
    max_range: float = 30.0
    v_fov_deg: float = 45.0
    h_fov_deg: float = 360.0
    noise_sigma: float = 0.008
    seed: int = 0

    def __post_init__(self):
        if self.v_resolution < 1 or self.h_resolution < 1:
            raise InvalidSpecError("resolutions must be >= 1")
        if not 0 < self.min_range < self.max_range:
            raise InvalidSpecError("need 0 < min_range < max_range")
        if not 0 < self.v_fov_deg <= 180:
            raise InvalidSpecError("vertical FOV must be in (0, 180]")
        if not 0 < self.h_fov_deg <= 360:
            raise InvalidSpecError("horizontal FOV must be in (0, 360]")
        if self.noise_sigma < 0:
            raise InvalidSpecError("noise sigma must be >= 0")


@dataclass(frozen=True)
class TrussSpec:
    """Rectangular bar lattice on a cubic node grid of pitch bar_length."""

    node_counts: tuple[int, int, int] = (2, 2, 2)
    bar_length: float = 2.0
    bar_width: float = 0.15
    crossed: bool = False
    label_mode: str = "per_face"

    def __post_init__(self):
        if len(self.node_counts) != 3 or any(int(c) < 2 for c in self.node_counts):
            raise InvalidSpecError("node counts must be >= 2 on every axis")
        object.__setattr__(self, "node_counts", tuple(int(c) for c in self.node_counts))
        if self.bar_length <= 0 or self.bar_width <= 0:
            raise InvalidSpecError("bar dimensions must be positive")
        if self.bar_width >= self.bar_length:
            raise InvalidSpecError("bar width must be smaller than bar length")
        if self.label_mode not in ("per_bar", "per_face"):
            raise InvalidSpecError(f"unknown label mode {self.label_mode!r}")

    @property
    def spans(self) -> tuple[float, float, float]:
        """Node-grid extent per axis in meters."""
        return tuple((c - 1) * self.bar_length for c in self.node_counts)


@dataclass(frozen=True)
class BoxFieldSpec:
    """Randomised parallelepipeds for training scenes (square cross-section)."""

    count: int = 40
    length_bounds: tuple[float, float] = (0.5, 4.0)
    width_bounds: tuple[float, float] = (0.05, 0.4)
    position_min: tuple[float, float, float] = (-15.0, -15.0, 0.0)
    position_max: tuple[float, float, float] = (15.0, 15.0, 6.0)

    def __post_init__(self):
        if self.count < 0:
            raise InvalidSpecError("box count must be >= 0")
        for lo, hi in (self.length_bounds, self.width_bounds):
            if not 0 < lo <= hi:
                raise InvalidSpecError("box dimension bounds must satisfy 0 < lo <= hi")
        if any(a > b for a, b in zip(self.position_min, self.position_max)):
            raise InvalidSpecError("box placement bounds are ill-ordered")


@dataclass(frozen=True)
class SceneSpec:
    """World recipe: ground, optional truss, trees, optional training boxes."""

    structure: Optional[TrussSpec] = None
    ground_amplitude: float = 0.2
    ground_wavelength: float = 10.0
    tree_count: int = 0
    tree_scale_bounds: tuple[float, float] = (0.7, 1.5)
    tree_xy_min: tuple[float, float] = (-25.0, -25.0)
    tree_xy_max: tuple[float, float] = (25.0, 25.0)
    boxes: Optional[BoxFieldSpec] = None
    seed: int = 0

    def __post_init__(self):
        if self.tree_count < 0:
            raise InvalidSpecError("tree count must be >= 0")
        lo, hi = self.tree_scale_bounds
        if not 0 < lo <= hi:
            raise InvalidSpecError("tree scale bounds must satisfy 0 < lo <= hi")
        if any(a > b for a, b in zip(self.tree_xy_min, self.tree_xy_max)):
            raise InvalidSpecError("tree placement bounds are ill-ordered")
        HeightFieldGround(self.ground_amplitude, self.ground_wavelength)


def build_truss(spec: TrussSpec) -> list[OrientedBox]:
    """Axis-aligned bars joining every pair of adjacent grid nodes.

    Bars are emitted X-axis first, then Y, then Z, then (if crossed) one
    diagonal per exterior lateral panel with alternating direction. Labels
    are sequential from 1: one per bar in per_bar mode, six per bar
    (-x +x -y +y -z +z) in per_face mode.
    """
    nx, ny, nz = spec.node_counts
    L, w = spec.bar_length, spec.bar_width
    bars: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []

    def axis_half(axis):
        h = np.full(3, w / 2.0)
        h[axis] = L / 2.0
        return h

    for ix in range(nx - 1):
        for iy in range(ny):
            for iz in range(nz):
                c = np.array([(ix + 0.5) * L, iy * L, iz * L])
                bars.append((c, axis_half(0), np.eye(3)))
    for ix in range(nx):
        for iy in range(ny - 1):
            for iz in range(nz):
                c = np.array([ix * L, (iy + 0.5) * L, iz * L])
                bars.append((c, axis_half(1), np.eye(3)))
    for ix in range(nx):
        for iy in range(ny):
            for iz in range(nz - 1):
                c = np.array([ix * L, iy * L, (iz + 0.5) * L])
                bars.append((c, axis_half(2), np.eye(3)))

    if spec.crossed:
        diag_half = np.array([L * np.sqrt(2.0) / 2.0, w / 2.0, w / 2.0])

        def diag_box(p0, p1, panel_normal):
            u = (p1 - p0) / np.linalg.norm(p1 - p0)
            v = np.asarray(panel_normal, dtype=np.float64)
            rot = np.column_stack([u, v, np.cross(u, v)])
            return ((p0 + p1) / 2.0, diag_half, rot)

        for iy in (0, ny - 1):                       # panels on the y-min/max faces
            for ix in range(nx - 1):
                for iz in range(nz - 1):
                    y = iy * L
                    a = np.array([ix * L, y, iz * L])
                    b = np.array([(ix + 1) * L, y, (iz + 1) * L])
                    if (ix + iz) % 2:
                        a, b = np.array([ix * L, y, (iz + 1) * L]), \
                            np.array([(ix + 1) * L, y, iz * L])
                    bars.append(diag_box(a, b, (0.0, 1.0, 0.0)))
        for ix in (0, nx - 1):                       # panels on the x-min/max faces
            for iy in range(ny - 1):
                for iz in range(nz - 1):
                    x = ix * L
                    a = np.array([x, iy * L, iz * L])
                    b = np.array([x, (iy + 1) * L, (iz + 1) * L])
                    if (iy + iz) % 2:
                        a, b = np.array([x, iy * L, (iz + 1) * L]), \
                            np.array([x, (iy + 1) * L, iz * L])
                    bars.append(diag_box(a, b, (1.0, 0.0, 0.0)))

    boxes = []
    for b, (center, half, rot) in enumerate(bars):
        if spec.label_mode == "per_bar":
            labels = np.full(6, b + 1, dtype=np.int64)
        else:
            labels = np.arange(6 * b + 1, 6 * b + 7, dtype=np.int64)
        boxes.append(OrientedBox(center, half, rot, labels))
    return boxes


def structure_bounding_box(spec: TrussSpec) -> tuple[np.ndarray, np.ndarray]:
    """World-frame bbox of the node grid once the truss is seated in a scene
    (grid centred in x/y at the origin, base at z = 0)."""
    sx, sy, sz = spec.spans
    lo = np.array([-sx / 2.0, -sy / 2.0, 0.0])
    hi = np.array([sx / 2.0, sy / 2.0, sz])
    return lo, hi


def _make_tree(x, y, scale, ground: HeightFieldGround):
    base_z = float(ground.height(x, y)) - 0.05
    trunk_h = 2.2 * scale
    trunk = VerticalCylinder(np.array([x, y, base_z]), trunk_h, 0.12 * scale, label=0)
    canopy_r = np.array([1.1, 1.1, 1.4]) * scale
    canopy_c = np.array([x, y, base_z + trunk_h + 0.6 * canopy_r[2]])
    return trunk, Ellipsoid(canopy_c, canopy_r, label=0)


def build_scene(spec: SceneSpec) -> Scene:
    """Deterministic world from a SceneSpec: ground, seated truss, seeded
    random boxes and trees. Structure labels stay 1..K consecutive."""
    ground = HeightFieldGround(spec.ground_amplitude, spec.ground_wavelength)
    solids: list = []
    next_label = 1

    if spec.structure is not None:
        boxes = build_truss(spec.structure)
        sx, sy, _ = spec.structure.spans
        shift = np.array([-sx / 2.0, -sy / 2.0, 0.0])
        for b in boxes:
            solids.append(OrientedBox(b.center + shift, b.half_extents,
                                      b.rotation, b.face_labels))
        next_label = int(max(b.face_labels.max() for b in boxes)) + 1

    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    if spec.boxes is not None:
        f = spec.boxes
        lo = np.asarray(f.position_min)
        hi = np.asarray(f.position_max)
        for _ in range(f.count):
            length = rng.uniform(*f.length_bounds)
            width = rng.uniform(*f.width_bounds)
            pos = rng.uniform(lo, hi)
            rot = quat_to_matrix(random_unit_quaternion(rng))
            labels = np.arange(next_label, next_label + 6, dtype=np.int64)
            next_label += 6
            solids.append(OrientedBox(pos, [length / 2, width / 2, width / 2],
                                      rot, labels))

    # trees are background clutter around the structure; redraw positions
    # that would plant one inside the lattice footprint
    exclude = None
    if spec.structure is not None:
        lo, hi = structure_bounding_box(spec.structure)
        exclude = (lo[:2] - 1.0, hi[:2] + 1.0)
    for _ in range(spec.tree_count):
        for _ in range(100):
            x = rng.uniform(spec.tree_xy_min[0], spec.tree_xy_max[0])
            y = rng.uniform(spec.tree_xy_min[1], spec.tree_xy_max[1])
            if exclude is None or not ((exclude[0][0] <= x <= exclude[1][0]) and
                                       (exclude[0][1] <= y <= exclude[1][1])):
                break
        scale = rng.uniform(*spec.tree_scale_bounds)
        solids.extend(_make_tree(x, y, scale, ground))

    return Scene(solids, ground)


def pose_has_clearance(scene: Scene, position, margin: float = 0.2) -> bool:
    """True when the position keeps ``margin`` distance from every solid.

    A sensor spawned inside a bar or a tree produces a physically
    impossible scan, so dataset generation rejects such draws.
    """
    p = np.asarray(position, dtype=np.float64)
    for solid in scene.solids:
        if isinstance(solid, OrientedBox):
            local = np.abs(solid.rotation.T @ (p - solid.center))
            if (local <= solid.half_extents + margin).all():
                return False
        elif isinstance(solid, VerticalCylinder):
            r = np.hypot(p[0] - solid.base[0], p[1] - solid.base[1])
            z0 = solid.base[2] - margin
            z1 = solid.base[2] + solid.height + margin
            if r <= solid.radius + margin and z0 <= p[2] <= z1:
                return False
        elif isinstance(solid, Ellipsoid):
            if np.linalg.norm((p - solid.center) / (solid.radii + margin)) <= 1.0:
                return False
    return True


def sample_sensor_pose(mode: str, bounds, seed) -> Pose:
    """Draw a sensor pose.

    fixed_position_random_orientation: bounds is the (x, y, z) position.
    random_within_structure: bounds is (lo, hi) corner arrays; the
    translation is uniform inside, orientation uniform over rotations.
    """
    rng = seed if isinstance(seed, np.random.Generator) else \
        np.random.default_rng(seed)
    if mode == FIXED_ORIENTATION_MODE:
        pos = np.asarray(bounds, dtype=np.float64).reshape(3)
    elif mode == WITHIN_STRUCTURE_MODE:
        lo = np.asarray(bounds[0], dtype=np.float64).reshape(3)
        hi = np.asarray(bounds[1], dtype=np.float64).reshape(3)
        if not (hi > lo).all():
            raise InvalidBoundsError("pose bounds must satisfy hi > lo per axis")
        pos = rng.uniform(lo, hi)
    else:
        raise ValueError(f"unknown pose mode {mode!r}")
    quat = random_unit_quaternion(rng)
    return Pose(tuple(pos), tuple(quat))


# ---------------------------------------------------------------------------
# raycasting
# ---------------------------------------------------------------------------

def ray_grid(cfg: SensorConfig):
    """Unit ray directions in the sensor frame, ordered channel-major
    (elevation row i, azimuth column j -> index i * h_resolution + j)."""
    if cfg.v_resolution == 1:
        els = np.array([0.0])
    else:
        half = np.deg2rad(cfg.v_fov_deg) / 2.0
        els = np.linspace(-half, half, cfg.v_resolution)
    azs = np.arange(cfg.h_resolution) * (np.deg2rad(cfg.h_fov_deg) / cfg.h_resolution)
    ce, se = np.cos(els), np.sin(els)
    ca, sa = np.cos(azs), np.sin(azs)
    dirs = np.empty((cfg.v_resolution, cfg.h_resolution, 3))
    dirs[:, :, 0] = ce[:, None] * ca[None, :]
    dirs[:, :, 1] = ce[:, None] * sa[None, :]
    dirs[:, :, 2] = se[:, None]
    return dirs.reshape(-1, 3), els, azs


def _candidate_rays(center_s, radius, els, azs):
    """Indices of grid rays whose direction can intersect the bounding
    sphere (conservative spherical-cap bound); None means all rays."""
    dist = float(np.linalg.norm(center_s))
    if dist <= radius:
        return None
    half = np.arcsin(min(1.0, radius / dist)) + 1e-9
    el_c = np.arcsin(np.clip(center_s[2] / dist, -1.0, 1.0))
    lo, hi = el_c - half, el_c + half
    i0 = int(np.searchsorted(els, lo - 1e-12, side="left"))
    i1 = int(np.searchsorted(els, hi + 1e-12, side="right")) - 1
    if i1 < i0:
        return np.empty(0, dtype=np.intp)
    rows = np.arange(i0, i1 + 1)

    h = len(azs)
    if abs(el_c) + half >= np.pi / 2 - 1e-9:
        cols = np.arange(h)
    else:
        az_c = np.arctan2(center_s[1], center_s[0])
        d_az = np.arcsin(min(1.0, np.sin(half) / np.cos(el_c))) + 1e-9
        diff = (azs - az_c + np.pi) % (2 * np.pi) - np.pi
        cols = np.flatnonzero(np.abs(diff) <= d_az)
        if len(cols) == 0:
            return np.empty(0, dtype=np.intp)
    return (rows[:, None] * h + cols[None, :]).ravel()


def raycast_scan(scene: Scene, pose: Pose, cfg: SensorConfig) -> LabeledCloud:
    """Simulate one scan: nearest-hit labels, range gating, along-ray noise.

    Rays outside [min_range, max_range] of their nearest hit yield no point.
    Noise draws come from one per-ray slot of a counter-based stream keyed by
    cfg.seed, so output does not depend on evaluation order.
    """
    dirs_s, els, azs = ray_grid(cfg)
    R = pose.rotation_matrix()
    origin = np.asarray(pose.translation, dtype=np.float64)
    dirs_w = dirs_s @ R.T
    n = len(dirs_s)

    t_best = np.full(n, np.inf)
    label_best = np.zeros(n, dtype=np.int64)
    for solid in scene.solids:
        center_s = R.T @ (solid.center - origin)
        r = solid.bounding_radius
        if np.linalg.norm(center_s) - r > cfg.max_range:
            continue
        idx = _candidate_rays(center_s, r, els, azs)
        if idx is None:
            t, labels = intersect_solid(origin, dirs_w, solid)
            better = t < t_best
            t_best[better] = t[better]
            label_best[better] = labels[better]
        elif len(idx):
            t, labels = intersect_solid(origin, dirs_w[idx], solid)
            better = t < t_best[idx]
            upd = idx[better]
            t_best[upd] = t[better]
            label_best[upd] = labels[better]

    if scene.ground is not None:
        t_upper = np.minimum(t_best, cfg.max_range + 1.0)
        tg = ray_ground(origin, dirs_w, scene.ground, t_upper)
        better = tg < t_best
        t_best[better] = tg[better]
        label_best[better] = 0

    hit = np.isfinite(t_best) & (t_best >= cfg.min_range) & (t_best <= cfg.max_range)
    ranges = t_best[hit]
    if cfg.noise_sigma > 0.0:
        rng = np.random.Generator(np.random.Philox(cfg.seed))
        noise = rng.normal(0.0, cfg.noise_sigma, size=n)
        ranges = ranges + noise[hit]
    points = dirs_s[hit] * ranges[:, None]
    return LabeledCloud(points, label_best[hit], sensor_pose=pose)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def spec_fingerprint(scene_spec: SceneSpec, sensor: SensorConfig) -> str:
    blob = json.dumps({"scene": asdict(scene_spec), "sensor": asdict(sensor)},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _scan_record(i: int, scene_spec: SceneSpec, sensor: SensorConfig,
                 fixed_position, base_seed: int, out_dir: str) -> dict:
    """Build, scan and write one cloud; returns its manifest record."""
    from . import io as tio

    root = np.random.SeedSequence(entropy=base_seed, spawn_key=(i,))
    scene_child, pose_child, noise_child = root.spawn(3)
    spec_i = scene_spec
    if scene_spec.boxes is not None:
        spec_i = replace(scene_spec,
                         seed=int(scene_child.generate_state(1, np.uint64)[0]))
    scene = build_scene(spec_i)

    pose_rng = np.random.default_rng(pose_child)
    if scene_spec.structure is not None:
        lo, hi = structure_bounding_box(scene_spec.structure)
        lo = lo.copy()
        lo[2] = max(lo[2], scene_spec.ground_amplitude + 0.3)
        pose = sample_sensor_pose(WITHIN_STRUCTURE_MODE, (lo, hi), pose_rng)
        for _ in range(200):
            if pose_has_clearance(scene, pose.translation):
                break
            pose = sample_sensor_pose(WITHIN_STRUCTURE_MODE, (lo, hi), pose_rng)
    else:
        pose = sample_sensor_pose(FIXED_ORIENTATION_MODE, fixed_position, pose_rng)

    scan_seed = int(noise_child.generate_state(1, np.uint64)[0])
    cloud = raycast_scan(scene, pose, replace(sensor, seed=scan_seed))

    rel = f"clouds/scan_{i:05d}.pcd"
    tio.write_pcd(cloud, Path(out_dir) / rel, mode="binary")
    return {
        "file": rel,
        "seed": scan_seed,
        "pose": {"translation": list(pose.translation),
                 "quaternion": list(pose.quaternion)},
        "spec_hash": spec_fingerprint(scene_spec, sensor),
    }


def generate_dataset(scene_spec: SceneSpec, n_scans: int, seed: int, out_dir,
                     sensor: SensorConfig = SensorConfig(),
                     fixed_position=(0.0, 0.0, 2.0), jobs: int = 1) -> list[dict]:
    """Write n_scans labeled PCD scans plus a manifest under out_dir.

    Every scan draws from an independent stream derived from (seed, index),
    so the dataset is byte-reproducible and order/parallelism independent.
    The manifest (one JSON record per line) is written last.
    """
    if n_scans < 1:
        raise InvalidSpecError("n_scans must be >= 1")
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    args = [(i, scene_spec, sensor, tuple(fixed_position), seed, str(out))
            for i in range(n_scans)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_scan_record_star, args))
    else:
        records = [_scan_record_star(a) for a in args]
    with open(out / "manifest.json-lines", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


def _scan_record_star(args) -> dict:
    return _scan_record(*args)
