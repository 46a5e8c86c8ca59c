"""Deterministic synthetic waterway scenes and a 32-beam LiDAR model.

Scenes are built from a horizontal water plane, axis-aligned boxes (walls,
decks, ground) and vegetation blobs expanded into seeded clutters of small
boxes. Scan generation is pure ray casting: (scene, pose, seed) fully
determines every emitted point.

Scene files are line oriented; see parse_scene for the grammar.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, rpy_to_matrix
from .scan_io import RawScan

# Ground-truth point labels.
LABELS = ("water", "wall", "vegetation", "deck", "ground")
LABEL_WATER, LABEL_WALL, LABEL_VEG, LABEL_DECK, LABEL_GROUND = range(5)
_KIND_TO_LABEL = {"wall": LABEL_WALL, "deck": LABEL_DECK, "ground": LABEL_GROUND}

# 32 beam elevations over a 70 degree vertical FoV, denser near the horizon.
# Fixed table; ring index 0 is the most downward beam.
BEAM_ELEVATIONS_DEG = (
    -55.0, -51.5, -48.0, -44.5, -41.0, -37.5, -34.0, -30.5,
    -27.0, -23.5, -20.0, -17.0, -15.0, -13.4, -11.8, -10.2,
    -8.7, -7.1, -5.5, -3.9, -2.4, -0.8, 0.8, 2.4,
    3.9, 5.5, 7.1, 8.7, 10.2, 11.8, 13.4, 15.0,
)

N_BEAMS = 32
N_STEPS = 1800
SCAN_PERIOD = 0.1  # seconds per revolution at 10 Hz


class SceneError(ValueError):
    """Malformed scene specification."""


@dataclass
class Box:
    kind: str
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if (self.lo > self.hi).any():
            raise SceneError(f"box min exceeds max: {self.lo} / {self.hi}")


@dataclass
class Cylinder:
    """Vertical cylinder (mooring pile, pier, tank)."""

    kind: str
    center: np.ndarray  # (x, y)
    radius: float
    z0: float
    z1: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.radius <= 0 or self.z1 <= self.z0:
            raise SceneError("cylinder needs positive radius and z1 > z0")


@dataclass
class LidarModel:
    elevations_deg: tuple = BEAM_ELEVATIONS_DEG
    max_range: float = 150.0
    min_range: float = 0.3
    sigma: float = 0.02
    grazing_deg: float = 15.0

    def directions(self) -> np.ndarray:
        """Unit beam directions in the sensor frame, shape (32*1800, 3),
        ordered column-major (all rings of azimuth step 0, then step 1, ...)."""
        elev = np.deg2rad(np.asarray(self.elevations_deg))
        azim = np.arange(N_STEPS) * (2.0 * np.pi / N_STEPS)
        ce, se = np.cos(elev), np.sin(elev)
        ca, sa = np.cos(azim), np.sin(azim)
        # (step, ring, 3)
        d = np.empty((N_STEPS, N_BEAMS, 3))
        d[:, :, 0] = ca[:, None] * ce[None, :]
        d[:, :, 1] = sa[:, None] * ce[None, :]
        d[:, :, 2] = se[None, :]
        return d.reshape(-1, 3)


@dataclass
class SceneSpec:
    water_z: float | None = None
    boxes: list = field(default_factory=list)
    cylinders: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)  # [(t, Pose), ...]

    def validate(self) -> None:
        times = [t for t, _ in self.trajectory]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise SceneError("trajectory timestamps must be strictly increasing")


def _expand_veg(center_xy, radius, z0, height, amp, count, seed) -> list:
    """A vegetation hedge: a contiguous strip of jittered segments along x,
    a seeded noisy heightfield with depth texture."""
    rng = np.random.default_rng(seed)
    cx, cy = center_xy
    n = max(3, count)
    xs = np.linspace(cx - radius, cx + radius, n + 1)
    boxes = []
    for i in range(n):
        dy = rng.uniform(-0.03, 0.03)
        top = z0 + height + rng.uniform(-amp, amp)
        boxes.append(Box("veg", [xs[i], cy - 0.4 + dy, z0], [xs[i + 1], cy + 0.4 + dy, top]))
    return boxes


def _parse_kv(parts, line_no):
    out = {}
    for p in parts:
        if "=" not in p:
            raise SceneError(f"line {line_no}: expected key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k] = v
    return out


def _vec(s, line_no, n=3):
    vals = s.split(",")
    if len(vals) != n:
        raise SceneError(f"line {line_no}: expected {n} comma-separated values, got {s!r}")
    return np.array([float(v) for v in vals])


def parse_scene(text: str) -> SceneSpec:
    """Parse a scene file.

    Grammar (one declaration per line, '#' comments):
        water z=<f>
        box kind=<wall|deck|ground> min=<x,y,z> max=<x,y,z>
        veg center=<x,y> radius=<f> z0=<f> height=<f> amp=<f> count=<n> seed=<n>
        pose t=<f> x=<f> y=<f> z=<f> [yaw=<deg>] [pitch=<deg>] [roll=<deg>]
    """
    scene = SceneSpec()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind, kv = parts[0], _parse_kv(parts[1:], line_no)
        try:
            if kind == "water":
                scene.water_z = float(kv["z"])
            elif kind == "box":
                box_kind = kv.get("kind", "wall")
                if box_kind not in _KIND_TO_LABEL:
                    raise SceneError(f"line {line_no}: unknown box kind {box_kind!r}")
                scene.boxes.append(Box(box_kind, _vec(kv["min"], line_no), _vec(kv["max"], line_no)))
            elif kind == "veg":
                scene.boxes.extend(
                    _expand_veg(
                        _vec(kv["center"], line_no, 2),
                        float(kv["radius"]),
                        float(kv["z0"]),
                        float(kv["height"]),
                        float(kv.get("amp", "0.3")),
                        int(kv.get("count", "20")),
                        int(kv.get("seed", "0")),
                    )
                )
            elif kind == "cyl":
                cyl_kind = kv.get("kind", "wall")
                if cyl_kind not in _KIND_TO_LABEL:
                    raise SceneError(f"line {line_no}: unknown cyl kind {cyl_kind!r}")
                scene.cylinders.append(
                    Cylinder(
                        cyl_kind,
                        _vec(kv["center"], line_no, 2),
                        float(kv["r"]),
                        float(kv["z0"]),
                        float(kv["z1"]),
                    )
                )
            elif kind == "pose":
                rot = rpy_to_matrix(
                    np.deg2rad(float(kv.get("roll", "0"))),
                    np.deg2rad(float(kv.get("pitch", "0"))),
                    np.deg2rad(float(kv.get("yaw", "0"))),
                )
                t = np.array([float(kv["x"]), float(kv["y"]), float(kv["z"])])
                scene.trajectory.append((float(kv["t"]), Pose(rot, t)))
            else:
                raise SceneError(f"line {line_no}: unknown declaration {kind!r}")
        except KeyError as exc:
            raise SceneError(f"line {line_no}: missing field {exc.args[0]!r}") from None
        except ValueError as exc:
            if isinstance(exc, SceneError):
                raise
            raise SceneError(f"line {line_no}: bad number ({exc})") from None
    scene.validate()
    return scene


def _ray_boxes(origin: np.ndarray, dirs: np.ndarray, boxes, t_min: float, t_max: float):
    """Nearest box hit per ray: returns (t, box_index), inf/-1 where none."""
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int32)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for i, box in enumerate(boxes):
        t1 = (box.lo[None, :] - origin[None, :]) * inv
        t2 = (box.hi[None, :] - origin[None, :]) * inv
        # Degenerate axes (dir == 0): inside-slab test.
        zero = dirs == 0.0
        if zero.any():
            inside = (origin >= box.lo) & (origin <= box.hi)
            t1 = np.where(zero, np.where(inside[None, :], -np.inf, np.inf), t1)
            t2 = np.where(zero, np.where(inside[None, :], np.inf, -np.inf), t2)
        near = np.minimum(t1, t2).max(axis=1)
        far = np.maximum(t1, t2).min(axis=1)
        hit = (far >= near) & (near >= t_min) & (near <= t_max) & (near < best_t)
        best_t[hit] = near[hit]
        best_i[hit] = i
    return best_t, best_i


def _ray_cylinders(origin: np.ndarray, dirs: np.ndarray, cyls, t_min: float, t_max: float):
    """Nearest cylinder hit per ray: returns (t, cylinder_index)."""
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int32)
    for i, cyl in enumerate(cyls):
        ox = origin[0] - cyl.center[0]
        oy = origin[1] - cyl.center[1]
        a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
        b = 2.0 * (ox * dirs[:, 0] + oy * dirs[:, 1])
        c = ox * ox + oy * oy - cyl.radius**2
        disc = b * b - 4.0 * a * c
        ok = (disc > 0.0) & (a > 1e-12)
        t = np.full(n, np.inf)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t[ok] = (-b[ok] - sq[ok]) / (2.0 * a[ok])
        z = origin[2] + t * dirs[:, 2]
        hit = ok & (t >= t_min) & (t <= t_max) & (z >= cyl.z0) & (z <= cyl.z1) & (t < best_t)
        best_t[hit] = t[hit]
        best_i[hit] = i
    return best_t, best_i


def simulate_scan(
    scene: SceneSpec,
    pose: Pose,
    lidar: LidarModel | None = None,
    seed: int = 0,
    scan_id: int = 0,
    stamp: float = 0.0,
) -> tuple[RawScan, np.ndarray]:
    """Ray-cast one revolution from a world pose.

    Returns the scan (sensor frame) and per-point ground-truth labels.
    Water returns only occur above the grazing-angle threshold; geometric
    water hits below it terminate the beam without a return.
    """
    lidar = lidar or LidarModel()
    dirs_sensor = lidar.directions()
    dirs_world = dirs_sensor @ pose.r.T
    origin = pose.t
    n = dirs_world.shape[0]

    t_box, i_box = _ray_boxes(origin, dirs_world, scene.boxes, lidar.min_range, lidar.max_range)
    if scene.cylinders:
        t_cyl, i_cyl = _ray_cylinders(origin, dirs_world, scene.cylinders, lidar.min_range, lidar.max_range)
        cyl_lab = np.array([_KIND_TO_LABEL.get(c.kind, LABEL_WALL) for c in scene.cylinders] + [0], dtype=np.int32)
        closer = t_cyl < t_box
        t_box = np.where(closer, t_cyl, t_box)
        box_label_override = np.where(closer, cyl_lab[i_cyl], -1)
    else:
        box_label_override = np.full(n, -1, dtype=np.int32)

    t_water = np.full(n, np.inf)
    water_ok = np.zeros(n, dtype=bool)
    if scene.water_z is not None:
        dz = dirs_world[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            tw = (scene.water_z - origin[2]) / dz
        geom = np.isfinite(tw) & (tw >= lidar.min_range) & (tw <= lidar.max_range)
        t_water = np.where(geom, tw, np.inf)
        grazing = np.arcsin(np.clip(np.abs(dz), 0.0, 1.0))
        water_ok = geom & (grazing >= np.deg2rad(lidar.grazing_deg))

    # Boxes behind a geometric water hit are submerged: blocked either way.
    t_box = np.where(t_box <= t_water, t_box, np.inf)

    hit_water = water_ok & (t_water < t_box)
    hit_box = np.isfinite(t_box)
    t_hit = np.where(hit_water, t_water, t_box)
    keep = hit_water | hit_box

    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return RawScan(stamp=stamp, scan_id=scan_id), np.zeros(0, dtype=np.int32)

    rng = np.random.default_rng([seed, scan_id])
    noise = rng.normal(0.0, lidar.sigma, size=n) if lidar.sigma > 0 else np.zeros(n)
    t_noisy = t_hit[idx] + noise[idx]

    pts_world = origin[None, :] + t_noisy[:, None] * dirs_world[idx]
    pts_sensor = (pts_world - origin[None, :]) @ pose.r

    rings = (idx % N_BEAMS).astype(np.int32)
    steps = idx // N_BEAMS
    azimuth = steps * (2.0 * np.pi / N_STEPS)
    times = stamp + steps * (SCAN_PERIOD / N_STEPS)

    labels = np.empty(idx.size, dtype=np.int32)
    box_lab = np.array([_KIND_TO_LABEL.get(b.kind, LABEL_VEG) for b in scene.boxes] + [0], dtype=np.int32)
    labels[:] = box_lab[i_box[idx]]
    override = box_label_override[idx]
    labels[override >= 0] = override[override >= 0]
    labels[hit_water[idx]] = LABEL_WATER

    scan = RawScan(
        xyz=pts_sensor,
        ring=rings,
        azimuth=azimuth.astype(float),
        time=times.astype(float),
        stamp=stamp,
        scan_id=scan_id,
    )
    return scan, labels


def simulate_trajectory(scene: SceneSpec, lidar: LidarModel | None = None, seed: int = 0):
    """Yield (scan, labels, ground-truth pose) per trajectory entry."""
    for k, (t, pose) in enumerate(scene.trajectory):
        scan, labels = simulate_scan(scene, pose, lidar, seed=seed, scan_id=k, stamp=t)
        yield scan, labels, pose


def canal_scene_text(
    n_scans: int = 200,
    step: float = 0.4,
    width: float = 16.0,
    water_z: float = -1.5,
    post_spacing: float = 9.0,
    curve_amp: float = 0.3,
) -> str:
    """A canal: two long walls with protruding posts, water in between, and
    a gently weaving trajectory along +x."""
    length = n_scans * step + 60.0
    half = width / 2.0
    quay_top = 1.0  # low quay: upper beams see past it to the buildings
    lines = [f"water z={water_z}"]
    lines.append(f"box kind=wall min=-20,{half},{water_z} max={length},{half + 1.5},{quay_top}")
    lines.append(f"box kind=wall min=-20,{-half - 1.5},{water_z} max={length},{-half},{quay_top}")
    lines.append(f"box kind=wall min={length},{-half - 1.5},{water_z} max={length + 1.5},{half + 1.5},4.0")
    x = 0.0
    i = 0
    while x < length - 5.0:
        side = 1.0 if i % 2 == 0 else -1.0
        y0 = side * half
        y1 = side * (half - 1.2)
        lo_y, hi_y = min(y0, y1), max(y0, y1)
        w = 0.8 + 0.4 * ((i * 7) % 3)
        lines.append(
            f"box kind=wall min={x:.2f},{lo_y:.2f},{water_z} max={x + w:.2f},{hi_y:.2f},{1.5 + (i % 3) * 0.3:.2f}"
        )
        if i % 3 == 1:
            vy = -side * (half - 1.0)
            lines.append(
                f"veg center={x + 3.0:.2f},{vy:.2f} radius=1.8 z0={water_z} height=1.2 amp=0.35 count=28 seed={i}"
            )
        if i % 2 == 0:
            # Building block behind the bank: tall mid-range corners.
            by = side * (half + 2.0 + (i * 5) % 4)
            b_lo, b_hi = (by, by + 5.0) if side > 0 else (by - 5.0, by)
            depth = 6.0 + (i * 3) % 5
            lines.append(
                f"box kind=wall min={x + 1.0:.2f},{b_lo:.2f},{quay_top} max={x + 1.0 + depth:.2f},{b_hi:.2f},{7.0 + (i % 4):.1f}"
            )
        # Mooring piles off both banks: round, so their curvature response
        # is viewpoint independent.
        py = -side * (half - 1.3)
        for j, px in enumerate((x + 0.8, x + 2.5, x + 4.2)):
            yy = py if (i + j) % 2 == 0 else -py
            lines.append(
                f"cyl center={px:.2f},{yy:.2f} r={0.4 + 0.08 * ((i + j) % 3):.2f} "
                f"z0={water_z} z1={1.2 + 0.3 * ((i + j) % 3):.2f}"
            )
        x += post_spacing
        i += 1
    for k in range(n_scans):
        t = k * SCAN_PERIOD
        px = k * step
        py = curve_amp * np.sin(2.0 * np.pi * px / 50.0)
        dy = curve_amp * (2.0 * np.pi / 50.0) * np.cos(2.0 * np.pi * px / 50.0)
        yaw = np.rad2deg(np.arctan2(dy * step, step))
        lines.append(f"pose t={t:.3f} x={px:.3f} y={py:.4f} z=0 yaw={yaw:.4f}")
    return "\n".join(lines) + "\n"


def bridge_scene_text(
    clearance: float = 4.5,
    water_z: float = -1.43,
    n_scans: int = 12,
    step: float = 1.5,
) -> str:
    """Open water with quay walls and a deck spanning the canal at a known
    height above the water."""
    deck_lo = water_z + clearance
    lines = [f"water z={water_z}"]
    lines.append(f"box kind=wall min=-10,8,{water_z} max=60,9.5,2.5")
    lines.append(f"box kind=wall min=-10,-9.5,{water_z} max=60,-8,2.5")
    lines.append(f"box kind=deck min=24,-9.5,{deck_lo:.4f} max=30,9.5,{deck_lo + 1.0:.4f}")
    for k in range(n_scans):
        lines.append(f"pose t={k * SCAN_PERIOD:.3f} x={k * step:.3f} y=0 z=0 yaw=0")
    return "\n".join(lines) + "\n"


REFERENCE_SCENE = canal_scene_text(n_scans=10, step=0.5, post_spacing=6.0)
