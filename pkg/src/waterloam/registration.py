"""Two-stage scan registration.

Stage 1 matches planar features (water and other planar structure) as
point-to-plane correspondences and solves the vertical degrees of freedom
(t_z, roll, pitch); stage 2 matches edge features as point-to-line
correspondences and solves the horizontal ones (t_x, t_y, yaw) with the
stage-1 result held fixed. Each stage is a small Levenberg-Marquardt loop
with analytic Jacobians; the outer loop re-associates correspondences.

Parameter vector convention: (roll, pitch, yaw, tx, ty, tz) building
R = Rz(yaw) Ry(pitch) Rx(roll), valid for the small inter-scan motions the
odometry sees.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, matrix_to_rpy, rpy_to_matrix

MIN_CORRESPONDENCES = 10


class DegenerateGeometryError(RuntimeError):
    """The correspondence geometry does not constrain the solved DoF."""


@dataclass
class RegistrationConfig:
    max_dist: float = 1.0
    outer_iterations: int = 8
    inner_iterations: int = 10
    update_tol: float = 1e-4
    lm_lambda0: float = 1e-4
    min_eig_ratio: float = 1e-6
    max_source_points: int = 400
    pair_radius: float = 0.6       # max spacing of the two line-target points
    min_line_vertical: float = 0.75  # |z| of accepted line directions
    trim_quantile: float = 0.8     # keep this fraction of best correspondences
    trim_floor: float = 0.05       # never trim residuals below this (m)


@dataclass
class PlaneCorrespondences:
    """Point-to-plane set: source points against target plane patches."""

    src: np.ndarray            # (N, 3)
    anchor: np.ndarray         # (N, 3) point on the target plane
    normal: np.ndarray         # (N, 3) unit plane normal

    def __len__(self) -> int:
        return self.src.shape[0]


@dataclass
class LineCorrespondences:
    """Point-to-line set: source points against target line landmarks.

    radius > 0 marks a cylindrical landmark (mooring pile, pier): the
    residual is then distance-to-axis minus radius, which is unbiased by
    which side of the surface each frame happens to sample.
    """

    src: np.ndarray            # (N, 3)
    anchor: np.ndarray         # (N, 3) point on the target line
    direction: np.ndarray      # (N, 3) unit line direction
    radius: np.ndarray = None  # (N,)

    def __post_init__(self):
        if self.radius is None:
            self.radius = np.zeros(self.src.shape[0])

    def __len__(self) -> int:
        return self.src.shape[0]


@dataclass
class RegistrationResult:
    delta: Pose
    converged: bool = False
    failed: bool = False
    iterations: int = 0
    final_cost: float = float("inf")
    mean_residual: float = float("inf")
    cost_trace: list = field(default_factory=list)


def decimate(points: np.ndarray, max_count: int) -> np.ndarray:
    """Deterministic stride decimation to at most max_count points."""
    n = points.shape[0]
    if n <= max_count:
        return points
    stride = int(np.ceil(n / max_count))
    return points[::stride]


def _params_from_pose(pose: Pose) -> np.ndarray:
    roll, pitch, yaw = matrix_to_rpy(pose.r)
    return np.array([roll, pitch, yaw, pose.t[0], pose.t[1], pose.t[2]])


def _pose_from_params(p: np.ndarray) -> Pose:
    return Pose(rpy_to_matrix(p[0], p[1], p[2]), np.array(p[3:6]))


def _rotation_derivatives(roll: float, pitch: float, yaw: float):
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    dz = np.array([[-sy, -cy, 0.0], [cy, -sy, 0.0], [0.0, 0.0, 0.0]])
    dy = np.array([[-sp, 0.0, cp], [0.0, 0.0, 0.0], [-cp, 0.0, -sp]])
    dx = np.array([[0.0, 0.0, 0.0], [0.0, -sr, -cr], [0.0, cr, -sr]])
    d_roll = rz @ ry @ dx
    d_pitch = rz @ dy @ rx
    d_yaw = dz @ ry @ rx
    return rz @ ry @ rx, d_roll, d_pitch, d_yaw


def _plane_residuals(params, corr: PlaneCorrespondences):
    r, d_roll, d_pitch, d_yaw = _rotation_derivatives(params[0], params[1], params[2])
    moved = corr.src @ r.T + params[3:6]
    res = np.einsum("ij,ij->i", moved - corr.anchor, corr.normal)
    jac = np.empty((len(corr), 6))
    jac[:, 0] = np.einsum("ij,ij->i", corr.src @ d_roll.T, corr.normal)
    jac[:, 1] = np.einsum("ij,ij->i", corr.src @ d_pitch.T, corr.normal)
    jac[:, 2] = np.einsum("ij,ij->i", corr.src @ d_yaw.T, corr.normal)
    jac[:, 3:6] = corr.normal
    return res, jac


def _line_residuals(params, corr: LineCorrespondences):
    """Scalar residual per correspondence: perpendicular distance to the
    line axis minus the landmark radius."""
    r, d_roll, d_pitch, d_yaw = _rotation_derivatives(params[0], params[1], params[2])
    moved = corr.src @ r.T + params[3:6]
    diff = moved - corr.anchor
    along = np.einsum("ij,ij->i", diff, corr.direction)
    perp = diff - along[:, None] * corr.direction
    dist = np.linalg.norm(perp, axis=1)
    res = dist - corr.radius
    unit = perp / np.maximum(dist, 1e-9)[:, None]

    def project(cols):
        a = np.einsum("ij,ij->i", cols, corr.direction)
        return cols - a[:, None] * corr.direction

    jac = np.empty((len(corr), 6))
    jac[:, 0] = np.einsum("ij,ij->i", unit, project(corr.src @ d_roll.T))
    jac[:, 1] = np.einsum("ij,ij->i", unit, project(corr.src @ d_pitch.T))
    jac[:, 2] = np.einsum("ij,ij->i", unit, project(corr.src @ d_yaw.T))
    jac[:, 3:6] = unit - np.einsum("ij,ij->i", unit, corr.direction)[:, None] * corr.direction
    return res, jac


def _lm_solve(params, free_idx, residual_fn, cfg: RegistrationConfig):
    """Damped least squares over the free parameter subset.

    Returns (params, final_cost, cost_trace). Raises DegenerateGeometryError
    when the normal matrix is rank deficient over the free DoF.
    """
    params = params.copy()
    res, jac = residual_fn(params)
    cost = float(res @ res)
    trace = [cost]
    lam = cfg.lm_lambda0

    j_free = jac[:, free_idx]
    h = j_free.T @ j_free
    diag = np.sqrt(np.diag(h))
    if (diag <= 1e-12).any():
        raise DegenerateGeometryError("unconstrained parameter in the normal matrix")
    eigs = np.linalg.eigvalsh(h / np.outer(diag, diag))  # dimensionless conditioning
    if eigs[0] < cfg.min_eig_ratio * eigs[-1]:
        raise DegenerateGeometryError(
            f"normal matrix rank-deficient (scaled eigs {eigs[0]:.3e}/{eigs[-1]:.3e})"
        )

    for _ in range(cfg.inner_iterations):
        j_free = jac[:, free_idx]
        h = j_free.T @ j_free
        g = j_free.T @ res
        try:
            step = np.linalg.solve(h + lam * np.diag(np.diag(h)), -g)
        except np.linalg.LinAlgError:
            raise DegenerateGeometryError("singular damped system") from None
        candidate = params.copy()
        candidate[free_idx] += step
        new_res, new_jac = residual_fn(candidate)
        new_cost = float(new_res @ new_res)
        if new_cost < cost:
            params, res, jac, cost = candidate, new_res, new_jac, new_cost
            trace.append(cost)
            lam = max(lam / 10.0, 1e-12)
            if np.linalg.norm(step) < cfg.update_tol:
                break
        else:
            lam *= 10.0
            if lam > 1e6:
                break
    return params, cost, trace


def stage1_vertical(corr: PlaneCorrespondences, init: Pose, cfg: RegistrationConfig | None = None):
    """Solve (t_z, roll, pitch) from point-to-plane correspondences, holding
    (t_x, t_y, yaw) at the initial guess."""
    cfg = cfg or RegistrationConfig()
    if len(corr) < MIN_CORRESPONDENCES:
        raise DegenerateGeometryError(f"only {len(corr)} plane correspondences")
    params = _params_from_pose(init)
    free = np.array([0, 1, 5])  # roll, pitch, tz
    params, cost, trace = _lm_solve(params, free, lambda p: _plane_residuals(p, corr), cfg)
    return _pose_from_params(params), cost, trace


def stage2_horizontal(corr: LineCorrespondences, vertical: Pose, cfg: RegistrationConfig | None = None):
    """Solve (t_x, t_y, yaw) from point-to-line correspondences with the
    stage-1 vertical parameters fixed."""
    cfg = cfg or RegistrationConfig()
    if len(corr) < MIN_CORRESPONDENCES:
        raise DegenerateGeometryError(f"only {len(corr)} line correspondences")
    params = _params_from_pose(vertical)
    free = np.array([2, 3, 4])  # yaw, tx, ty
    params, cost, trace = _lm_solve(params, free, lambda p: _line_residuals(p, corr), cfg)
    return _pose_from_params(params), cost, trace


def _trim_line(corr: LineCorrespondences, pose: Pose, cfg: RegistrationConfig) -> LineCorrespondences:
    """Drop the worst point-to-line residuals (robust trimmed association)."""
    if len(corr) < MIN_CORRESPONDENCES:
        return corr
    res, _ = _line_residuals(_params_from_pose(pose), corr)
    dists = np.abs(res)
    cut = max(float(np.quantile(dists, cfg.trim_quantile)), cfg.trim_floor)
    keep = dists <= cut
    if keep.sum() < MIN_CORRESPONDENCES:
        return corr
    return LineCorrespondences(corr.src[keep], corr.anchor[keep], corr.direction[keep], corr.radius[keep])


def _trim_plane(corr: PlaneCorrespondences, pose: Pose, cfg: RegistrationConfig) -> PlaneCorrespondences:
    if len(corr) < MIN_CORRESPONDENCES:
        return corr
    res, _ = _plane_residuals(_params_from_pose(pose), corr)
    dists = np.abs(res)
    cut = max(float(np.quantile(dists, cfg.trim_quantile)), cfg.trim_floor)
    keep = dists <= cut
    if keep.sum() < MIN_CORRESPONDENCES:
        return corr
    return PlaneCorrespondences(corr.src[keep], corr.anchor[keep], corr.normal[keep])


class TargetCloud:
    """Indexed target points with per-point row ids for primitive fitting."""

    def __init__(self, xyz: np.ndarray, rows: np.ndarray):
        self.xyz = xyz
        self.rows = rows
        self.tree = cKDTree(xyz) if xyz.shape[0] else None

    def __len__(self) -> int:
        return self.xyz.shape[0]


@dataclass
class LineTargets:
    """Fitted vertical line landmarks (corner or pile stacks)."""

    anchor: np.ndarray     # (L, 3)
    direction: np.ndarray  # (L, 3) unit
    radius: np.ndarray     # (L,) 0 for corner lines, >0 for cylinder axes

    def __len__(self) -> int:
        return self.anchor.shape[0]


def _fit_circle_xy(pts: np.ndarray):
    """Least-squares circle through xy points; returns (cx, cy, r)."""
    x, y = pts[:, 0], pts[:, 1]
    a = np.column_stack([2.0 * x, 2.0 * y, np.ones_like(x)])
    b = x * x + y * y
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    cx, cy, c = sol
    r2 = c + cx * cx + cy * cy
    if r2 <= 0:
        return None
    return float(cx), float(cy), float(np.sqrt(r2))


def extract_vertical_lines(
    xyz: np.ndarray,
    rows: np.ndarray,
    xy_radius: float = 0.4,
    min_rows: int = 3,
    min_vertical: float = 0.85,
    max_pile_radius: float = 1.5,
) -> LineTargets:
    """Cluster edge-rule points into vertical stacks and fit one landmark
    line per stack.

    A stack whose xy footprint fits a small circle is treated as a pile or
    pier: the landmark is its axis plus radius, so matching is unbiased by
    which part of the surface each frame sampled. Other stacks (building
    corners) keep a plain best-fit line.
    """
    empty = LineTargets(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    if xyz.shape[0] == 0:
        return empty
    keys = np.floor(xyz[:, :2] / xy_radius).astype(np.int64)
    buckets: dict[tuple, list] = {}
    for i in range(xyz.shape[0]):
        buckets.setdefault((keys[i, 0], keys[i, 1]), []).append(i)
    seen = set()
    anchors, dirs, radii = [], [], []
    for cell in sorted(buckets):
        if cell in seen:
            continue
        stack_cells = [cell]
        seen.add(cell)
        frontier = [cell]
        while frontier:
            cx, cy = frontier.pop()
            for nb in ((cx + 1, cy), (cx - 1, cy), (cx, cy + 1), (cx, cy - 1)):
                if nb in buckets and nb not in seen:
                    seen.add(nb)
                    stack_cells.append(nb)
                    frontier.append(nb)
        idx = np.concatenate([buckets[c] for c in stack_cells])
        pts = xyz[idx]
        if np.unique(rows[idx]).size < min_rows:
            continue
        centroid = pts.mean(axis=0)
        q = pts - centroid
        _, _, vt = np.linalg.svd(q, full_matrices=False)
        d = vt[0]
        if abs(d[2]) < min_vertical:
            continue
        if d[2] < 0:
            d = -d
        circle = _fit_circle_xy(pts) if pts.shape[0] >= 6 else None
        if circle is not None:
            ccx, ccy, cr = circle
            near = np.hypot(ccx - centroid[0], ccy - centroid[1]) <= 2.0 * max_pile_radius
            if 0.05 <= cr <= max_pile_radius and near:
                anchors.append(np.array([ccx, ccy, centroid[2]]))
                dirs.append(np.array([0.0, 0.0, 1.0]))
                radii.append(cr)
                continue
        anchors.append(centroid)
        dirs.append(d)
        radii.append(0.0)
    if not anchors:
        return empty
    return LineTargets(np.array(anchors), np.array(dirs), np.array(radii))


def merge_line_targets(groups) -> LineTargets:
    """Concatenate several LineTargets."""
    groups = [g for g in groups if len(g)]
    if not groups:
        return LineTargets(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    return LineTargets(
        np.vstack([g.anchor for g in groups]),
        np.vstack([g.direction for g in groups]),
        np.concatenate([g.radius for g in groups]),
    )


def find_line_correspondences(
    src: np.ndarray, lines: LineTargets, guess: Pose, max_dist: float
) -> LineCorrespondences:
    """Associate each source point (moved by the guess) with the nearest
    line landmark (by surface distance) within max_dist."""
    empty = LineCorrespondences(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))
    if len(lines) == 0 or src.shape[0] == 0:
        return empty
    moved = guess.apply(src)
    diff = moved[:, None, :] - lines.anchor[None, :, :]          # (N, L, 3)
    along = np.einsum("nlk,lk->nl", diff, lines.direction)
    perp = diff - along[:, :, None] * lines.direction[None, :, :]
    dist = np.abs(np.linalg.norm(perp, axis=2) - lines.radius[None, :])
    best = np.argmin(dist, axis=1)
    ok = dist[np.arange(src.shape[0]), best] <= max_dist
    if not ok.any():
        return empty
    return LineCorrespondences(
        src[ok], lines.anchor[best[ok]], lines.direction[best[ok]], lines.radius[best[ok]]
    )


def find_plane_correspondences(
    src: np.ndarray, target: TargetCloud, guess: Pose, max_dist: float
) -> PlaneCorrespondences:
    """For each source point, a plane through its three nearest target
    points (skipped when nearly collinear)."""
    empty = PlaneCorrespondences(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))
    if target.tree is None or src.shape[0] == 0 or len(target) < 3:
        return empty
    moved = guess.apply(src)
    k = min(5, len(target))
    dist, idx = target.tree.query(moved, k=k, distance_upper_bound=max_dist)
    valid3 = np.isfinite(dist[:, :3]).all(axis=1)
    if not valid3.any():
        return empty
    rows = np.nonzero(valid3)[0]
    a = target.xyz[idx[rows, 0]]
    b = target.xyz[idx[rows, 1]]
    c = target.xyz[idx[rows, 2]]
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1)
    ok = norm > 1e-8
    n = n[ok] / norm[ok][:, None]
    return PlaneCorrespondences(src[rows][ok], a[ok], n)


def register_scan(
    cur_edges: np.ndarray,
    cur_planar: np.ndarray,
    target_lines: LineTargets,
    target_planar: TargetCloud,
    prior: Pose,
    cfg: RegistrationConfig | None = None,
) -> RegistrationResult:
    """Iterate correspondence search and the two solver stages.

    Falls back to the prior (failed=True) when both stages are unusable.
    """
    cfg = cfg or RegistrationConfig()
    cur_edges = decimate(cur_edges, cfg.max_source_points)
    cur_planar = decimate(cur_planar, cfg.max_source_points)

    pose = prior
    trace: list = []
    stage1_ok = False
    stage2_ok = False
    n_res = 1
    cost = float("inf")
    for it in range(cfg.outer_iterations):
        prev_params = _params_from_pose(pose)
        cost = 0.0
        n_res = 0

        pcorr = find_plane_correspondences(cur_planar, target_planar, pose, cfg.max_dist)
        pcorr = _trim_plane(pcorr, pose, cfg)
        try:
            pose, c1, _ = stage1_vertical(pcorr, pose, cfg)
            stage1_ok = True
            cost += c1
            n_res += len(pcorr)
        except DegenerateGeometryError:
            pass

        lcorr = find_line_correspondences(cur_edges, target_lines, pose, cfg.max_dist)
        lcorr = _trim_line(lcorr, pose, cfg)
        try:
            pose, c2, _ = stage2_horizontal(lcorr, pose, cfg)
            stage2_ok = True
            cost += c2
            n_res += len(lcorr)
        except DegenerateGeometryError:
            pass

        if not (stage1_ok or stage2_ok):
            return RegistrationResult(delta=prior, failed=True, iterations=it + 1)

        trace.append(cost)
        update = np.linalg.norm(_params_from_pose(pose) - prev_params)
        if update < cfg.update_tol:
            return RegistrationResult(
                delta=pose, converged=True, iterations=it + 1, final_cost=cost,
                mean_residual=cost / max(n_res, 1), cost_trace=trace,
            )
    return RegistrationResult(
        delta=pose, converged=False, iterations=cfg.outer_iterations, final_cost=cost,
        mean_residual=cost / max(n_res, 1), cost_trace=trace,
    )
