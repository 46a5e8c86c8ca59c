"""Scan preprocessing: vessel self-return removal, range-image projection,
water plane fitting and clustering of the remaining structure.

The range image is a fixed 32 x 1800 grid (ring x azimuth bin at 0.2 deg).
Three channels are kept per pixel: point coordinates, a binary water-surface
indicator and a cluster label (positive id, OUTLIER for small components,
0 for unlabeled).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import Plane, make_plane, orient_up
from .scan_io import RawScan

N_ROWS = 32
N_COLS = 1800
AZIMUTH_STEP = 2.0 * np.pi / N_COLS

OUTLIER = -1


class WaterFitError(RuntimeError):
    """No usable water surface in this frame; proceed without a plane."""


@dataclass
class VesselBBox:
    """Axis-aligned box (sensor frame) containing the vessel's own returns."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if (self.lo > self.hi).any():
            raise ValueError("bbox min exceeds max")

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        return ((xyz >= self.lo) & (xyz <= self.hi)).all(axis=1)


@dataclass
class RangeImage:
    """32 x 1800 projection of one scan with water/cluster channels."""

    xyz: np.ndarray = field(default_factory=lambda: np.full((N_ROWS, N_COLS, 3), np.nan))
    rng: np.ndarray = field(default_factory=lambda: np.full((N_ROWS, N_COLS), np.inf))
    valid: np.ndarray = field(default_factory=lambda: np.zeros((N_ROWS, N_COLS), dtype=bool))
    water: np.ndarray = field(default_factory=lambda: np.zeros((N_ROWS, N_COLS), dtype=bool))
    label: np.ndarray = field(default_factory=lambda: np.zeros((N_ROWS, N_COLS), dtype=np.int32))
    scan_id: int = 0

    def occupied_count(self) -> int:
        return int(self.valid.sum())


@dataclass
class WaterFit:
    plane: Plane
    inlier_count: int
    candidate_count: int


@dataclass
class RansacConfig:
    iterations: int = 200
    min_candidates: int = 50
    min_inlier_ratio: float = 0.3
    early_exit_ratio: float = 0.8
    min_normal_z: float = 0.5
    seed: int = 0


def filter_vessel(scan: RawScan, bbox: VesselBBox) -> RawScan:
    """Drop points inside the vessel box (boundary-inclusive)."""
    keep = ~bbox.contains(scan.xyz)
    return RawScan(
        xyz=scan.xyz[keep],
        ring=scan.ring[keep],
        azimuth=scan.azimuth[keep],
        time=scan.time[keep],
        stamp=scan.stamp,
        scan_id=scan.scan_id,
    )


def project_range_image(scan: RawScan) -> RangeImage:
    """Project points onto the (ring, azimuth bin) grid, keeping the nearer
    point on collisions."""
    img = RangeImage(scan_id=scan.scan_id)
    if len(scan) == 0:
        return img
    rows = scan.ring.astype(np.intp)
    cols = (np.floor(scan.azimuth / AZIMUTH_STEP).astype(np.intp)) % N_COLS
    rng = scan.ranges()
    # Write farthest first so the nearest point survives duplicate assignment.
    order = np.argsort(-rng, kind="stable")
    r, c = rows[order], cols[order]
    img.xyz[r, c] = scan.xyz[order]
    img.rng[r, c] = rng[order]
    img.valid[r, c] = True
    return img


def _fit_plane_lsq(points: np.ndarray) -> Plane:
    centroid = points.mean(axis=0)
    q = points - centroid
    _, _, vt = np.linalg.svd(q, full_matrices=False)
    n = vt[-1]
    return make_plane(n, -float(n @ centroid))


def fit_water_plane(
    img: RangeImage,
    n_lines: int = 8,
    tau_s: float = 0.05,
    cfg: RansacConfig | None = None,
) -> WaterFit:
    """RANSAC plane over the lowest rows, then flag every pixel of the image
    within tau_s of the plane as water.

    Raises WaterFitError when there are too few candidates, the consensus is
    too small, or the fitted plane is far from horizontal.
    """
    cfg = cfg or RansacConfig()
    cand_mask = img.valid[:n_lines]
    candidates = img.xyz[:n_lines][cand_mask]
    n_cand = candidates.shape[0]
    if n_cand < cfg.min_candidates:
        raise WaterFitError(f"only {n_cand} water candidates (< {cfg.min_candidates})")

    rng = np.random.default_rng(cfg.seed)
    best_inliers = None
    best_count = 0
    for _ in range(cfg.iterations):
        idx = rng.choice(n_cand, size=3, replace=False)
        a, b, c = candidates[idx]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n = n / norm
        d = -float(n @ a)
        dist = np.abs(candidates @ n + d)
        inliers = dist <= tau_s
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
            if count >= cfg.early_exit_ratio * n_cand:
                break

    if best_inliers is None or best_count < cfg.min_inlier_ratio * n_cand:
        raise WaterFitError(
            f"best consensus {best_count}/{n_cand} below floor {cfg.min_inlier_ratio:.2f}"
        )

    plane = orient_up(_fit_plane_lsq(candidates[best_inliers]))
    if plane.n[2] < cfg.min_normal_z:
        raise WaterFitError(f"fitted plane not horizontal (nz={plane.n[2]:.2f})")

    # Classification is plane-global: every pixel near the plane is water.
    pts = img.xyz[img.valid]
    near = np.abs(pts @ plane.n + plane.d) <= tau_s
    water = np.zeros_like(img.water)
    water[img.valid] = near
    img.water = water
    img.label[water] = 0
    inlier_count = int((np.abs(candidates @ plane.n + plane.d) <= tau_s).sum())
    return WaterFit(plane=plane, inlier_count=inlier_count, candidate_count=n_cand)


def _pair_angles(img: RangeImage, rows_a, cols_a, rows_b, cols_b) -> np.ndarray:
    """Beta angle of the range-image criterion for pixel pairs: the angle at
    the farther point of the triangle (sensor, A, B)."""
    pa = img.xyz[rows_a, cols_a]
    pb = img.xyz[rows_b, cols_b]
    ra = img.rng[rows_a, cols_a]
    rb = img.rng[rows_b, cols_b]
    cos_alpha = np.clip(np.einsum("ij,ij->i", pa, pb) / (ra * rb), -1.0, 1.0)
    sin_alpha = np.sqrt(1.0 - cos_alpha**2)
    d1 = np.maximum(ra, rb)
    d2 = np.minimum(ra, rb)
    return np.arctan2(d2 * sin_alpha, d1 - d2 * cos_alpha)


def segment_clusters(img: RangeImage, theta_seg: float = np.deg2rad(60.0), min_size: int = 30) -> RangeImage:
    """Label connected components of non-water pixels.

    4-connectivity with horizontal wraparound; two neighbors connect when
    the depth-angle criterion exceeds theta_seg. Components smaller than
    min_size become OUTLIER.
    """
    mask = img.valid & ~img.water
    if not mask.any():
        img.label[:] = 0
        return img

    flat_id = np.full((N_ROWS, N_COLS), -1, dtype=np.int64)
    rows, cols = np.nonzero(mask)
    n_pts = rows.size
    flat_id[rows, cols] = np.arange(n_pts)

    edges_a = []
    edges_b = []

    # Horizontal neighbors (with wraparound at the azimuth seam).
    cols_right = (cols + 1) % N_COLS
    ok = mask[rows, cols_right]
    if ok.any():
        beta = _pair_angles(img, rows[ok], cols[ok], rows[ok], cols_right[ok])
        keep = beta > theta_seg
        edges_a.append(flat_id[rows[ok][keep], cols[ok][keep]])
        edges_b.append(flat_id[rows[ok][keep], cols_right[ok][keep]])

    # Vertical neighbors.
    upper = rows + 1 < N_ROWS
    ru, cu = rows[upper], cols[upper]
    ok = mask[ru + 1, cu]
    if ok.any():
        beta = _pair_angles(img, ru[ok], cu[ok], ru[ok] + 1, cu[ok])
        keep = beta > theta_seg
        edges_a.append(flat_id[ru[ok][keep], cu[ok][keep]])
        edges_b.append(flat_id[ru[ok][keep] + 1, cu[ok][keep]])

    if edges_a:
        ea = np.concatenate(edges_a)
        eb = np.concatenate(edges_b)
    else:
        ea = np.zeros(0, dtype=np.int64)
        eb = np.zeros(0, dtype=np.int64)

    graph = coo_matrix((np.ones(ea.size, dtype=np.int8), (ea, eb)), shape=(n_pts, n_pts))
    n_comp, comp = connected_components(graph, directed=False)

    sizes = np.bincount(comp, minlength=n_comp)
    labels = np.zeros(n_pts, dtype=np.int32)
    small = sizes[comp] < min_size
    labels[small] = OUTLIER
    big = ~small
    if big.any():
        # Renumber surviving components in first-appearance (row, col) order.
        uniq, first = np.unique(comp[big], return_index=True)
        remap = np.zeros(n_comp, dtype=np.int32)
        remap[uniq[np.argsort(first)]] = np.arange(1, uniq.size + 1, dtype=np.int32)
        labels[big] = remap[comp[big]]

    img.label[:] = 0
    img.label[rows, cols] = labels
    return img
