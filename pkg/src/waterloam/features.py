"""Per-segment feature extraction from the labeled range image.

Two responses are computed over a sliding window of 2n+1 points along a
scan row, restricted to a single segment:

* curvature: squared norm of the mean difference vector
  ``|| (1/2n) sum(p_i - p~) ||^2`` -- responds to corners and spikes.
* roughness: mean squared deviation of the window with the component along
  its dominant direction removed (the two smaller eigenvalues of the window
  covariance). Zero for collinear points, ~delta^2 for alternating bumps of
  height delta, and invariant under rigid motion of the window. This is the
  variance response that keeps small bumps from cancelling out, unlike the
  classical range-difference metric (see traditional_range_metric).

Classification: edge when curvature > tau1 or roughness > tau2, flat when
roughness < tau3. Points near occlusions or on beam-parallel surfaces are
excluded. Non-maximum suppression keeps a bounded number of edges and flats
per azimuth sector; the full classified sets are kept alongside for mapping.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .preprocess import N_COLS, N_ROWS, OUTLIER, RangeImage

# Customary edge threshold of the classical range-difference response.
TRAD_EDGE_THRESHOLD = 0.1


@dataclass
class FeatureThresholds:
    tau1: float = 1.0      # curvature edge threshold (m^2)
    tau2: float = 8e-4     # roughness edge threshold (m^2)
    tau3: float = 4e-4     # roughness flat threshold (m^2)
    n: int = 5             # half window (2n+1 points)
    sectors: int = 6
    edges_per_sector: int = 2
    flats_per_sector: int = 4
    nms_radius: int = 5          # columns
    occlusion_jump: float = 1.0  # meters
    parallel_ratio: float = 0.02
    run_gap: int = 30            # max missing columns between sequence neighbors

    def __post_init__(self):
        if not self.tau3 < self.tau2:
            raise ValueError("tau3 must be below tau2")
        if self.n < 2:
            raise ValueError("half window n must be >= 2")


@dataclass
class FeatureSet:
    """Classified points of one scan.

    ``rough_*`` holds every edge-rule point (label 'edge' where selected by
    NMS, 'rough' otherwise); ``flat_*`` every flat-rule point (label 'flat',
    NMS selection in ``flat_sel``); ``water_*`` passes water pixels through.
    """

    scan_id: int = 0
    rough_xyz: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    rough_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    rough_cols: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    rough_curv: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rough_var: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rough_sel: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    flat_xyz: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    flat_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    flat_cols: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    flat_curv: np.ndarray = field(default_factory=lambda: np.zeros(0))
    flat_var: np.ndarray = field(default_factory=lambda: np.zeros(0))
    flat_sel: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    water_xyz: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    water_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    water_cols: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))

    @property
    def edges(self) -> np.ndarray:
        return self.rough_xyz[self.rough_sel]

    @property
    def edge_rows(self) -> np.ndarray:
        return self.rough_rows[self.rough_sel]

    @property
    def flats(self) -> np.ndarray:
        return self.flat_xyz[self.flat_sel]

    @property
    def flat_sel_rows(self) -> np.ndarray:
        return self.flat_rows[self.flat_sel]

    def is_empty(self) -> bool:
        return self.rough_xyz.shape[0] == 0 and self.flat_xyz.shape[0] == 0 and self.water_xyz.shape[0] == 0


def compute_curvature(line: np.ndarray, i: int, n: int) -> float:
    """Curvature of point i of an ordered segment line (2n+1 window)."""
    line = np.asarray(line, dtype=float)
    if i - n < 0 or i + n >= line.shape[0]:
        raise ValueError("insufficient neighbors for the curvature window")
    window = line[i - n : i + n + 1]
    v = ((2 * n + 1) * line[i] - window.sum(axis=0)) / (2 * n)
    return float(v @ v)


def compute_roughness(line: np.ndarray, i: int, n: int) -> float:
    """Roughness of point i: window variance orthogonal to its dominant
    direction (sum of the two smaller covariance eigenvalues)."""
    line = np.asarray(line, dtype=float)
    if i - n < 0 or i + n >= line.shape[0]:
        raise ValueError("insufficient neighbors for the roughness window")
    window = line[i - n : i + n + 1]
    q = window - window.mean(axis=0)
    cov = q.T @ q / window.shape[0]
    w = np.linalg.eigvalsh(cov)
    return float(max(w[0] + w[1], 0.0))


def traditional_range_metric(ranges: np.ndarray, i: int, n: int) -> float:
    """Classical normalized range-difference response (for comparison)."""
    ranges = np.asarray(ranges, dtype=float)
    if i - n < 0 or i + n >= ranges.shape[0]:
        raise ValueError("insufficient neighbors")
    window = ranges[i - n : i + n + 1]
    s = window.sum() - (2 * n + 1) * ranges[i]
    return float(abs(s) / (2 * n * abs(ranges[i])))


def _window_scores(pts: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized curvature and roughness for all interior points of a run."""
    m = pts.shape[0]
    size = 2 * n + 1
    if m < size:
        return np.zeros(0), np.zeros(0)
    csum = np.cumsum(np.vstack([np.zeros((1, 3)), pts]), axis=0)
    win_sum = csum[size:] - csum[:-size]          # (m-2n, 3)
    centers = pts[n : m - n]
    v = (size * centers - win_sum) / (2 * n)
    curv = np.einsum("ij,ij->i", v, v)

    outer = pts[:, :, None] * pts[:, None, :]     # (m, 3, 3)
    osum = np.cumsum(np.concatenate([np.zeros((1, 3, 3)), outer], axis=0), axis=0)
    win_m2 = osum[size:] - osum[:-size]
    mean = win_sum / size
    cov = win_m2 / size - mean[:, :, None] * mean[:, None, :]
    w = np.linalg.eigvalsh(cov)
    rough = np.maximum(w[:, 0] + w[:, 1], 0.0)
    return curv, rough


def _row_runs(img: RangeImage, row: int, run_gap: int):
    """Yield (label, cols, xyz) runs of consecutive same-segment pixels on a
    row, unrolled across the azimuth seam."""
    labels = img.label[row]
    occupied = np.nonzero(img.valid[row] & (labels > 0))[0]
    if occupied.size == 0:
        return
    for seg in np.unique(labels[occupied]):
        cols = occupied[labels[occupied] == seg]
        if cols.size < 2:
            continue
        # Rotate so the sequence starts after the largest circular gap.
        gaps = np.diff(np.append(cols, cols[0] + N_COLS))
        start = int(np.argmax(gaps)) + 1
        if start < cols.size:
            cols = np.concatenate([cols[start:], cols[:start]])
        unrolled = np.where(cols < cols[0], cols + N_COLS, cols)
        breaks = np.nonzero(np.diff(unrolled) > run_gap)[0] + 1
        for chunk in np.split(np.arange(cols.size), breaks):
            ccols = cols[chunk]
            if ccols.size >= 2:
                yield int(seg), ccols, img.xyz[row, ccols]


def extract_features(img: RangeImage, th: FeatureThresholds | None = None) -> FeatureSet:
    """Classify the segmented image into edge/flat/rough/water feature sets."""
    th = th or FeatureThresholds()
    n = th.n
    sector_width = N_COLS // th.sectors

    rough = {k: [] for k in ("xyz", "row", "col", "curv", "var", "sector", "seg")}
    flat = {k: [] for k in ("xyz", "row", "col", "curv", "var", "sector", "seg")}

    for row in range(N_ROWS):
        for seg, cols, pts in _row_runs(img, row, th.run_gap):
            m = pts.shape[0]
            if m < 2 * n + 1:
                continue
            curv, var = _window_scores(pts, n)
            rng = np.linalg.norm(pts, axis=1)
            interior = np.arange(n, m - n)

            # Unstable points: occlusion jumps and beam-parallel surfaces.
            d_prev = np.abs(rng[interior] - rng[interior - 1])
            d_next = np.abs(rng[interior + 1] - rng[interior])
            unstable = (d_prev > th.occlusion_jump) | (d_next > th.occlusion_jump)
            lim = th.parallel_ratio * rng[interior]
            unstable |= (d_prev > lim) & (d_next > lim)

            is_edge = ((curv > th.tau1) | (var > th.tau2)) & ~unstable
            is_flat = (var < th.tau3) & ~unstable & ~is_edge

            for mask, store in ((is_edge, rough), (is_flat, flat)):
                if not mask.any():
                    continue
                sel = interior[mask]
                store["xyz"].append(pts[sel])
                store["row"].append(np.full(sel.size, row, dtype=np.int32))
                store["col"].append((cols[sel] % N_COLS).astype(np.int32))
                store["curv"].append(curv[mask])
                store["var"].append(var[mask])
                store["sector"].append(((cols[sel] % N_COLS) // sector_width).astype(np.int32))
                store["seg"].append(np.full(sel.size, seg, dtype=np.int32))

    def _gather(store):
        if not store["xyz"]:
            return {k: (np.zeros((0, 3)) if k == "xyz" else np.zeros(0, dtype=np.int32 if k in ("row", "col", "sector", "seg") else float)) for k in store}
        return {k: np.concatenate(store[k]) for k in store}

    rough_g = _gather(rough)
    flat_g = _gather(flat)

    edge_score = np.maximum(rough_g["curv"] / th.tau1, rough_g["var"] / th.tau2)
    rough_sel = _nms(
        rough_g["row"], rough_g["col"], rough_g["sector"], rough_g["seg"],
        -edge_score, th.edges_per_sector, th.nms_radius,
    )
    flat_sel = _nms(
        flat_g["row"], flat_g["col"], flat_g["sector"], flat_g["seg"],
        flat_g["var"], th.flats_per_sector, th.nms_radius,
    )

    water_rows, water_cols = np.nonzero(img.water)
    fs = FeatureSet(
        scan_id=img.scan_id,
        rough_xyz=rough_g["xyz"], rough_rows=rough_g["row"], rough_cols=rough_g["col"],
        rough_curv=rough_g["curv"], rough_var=rough_g["var"], rough_sel=rough_sel,
        flat_xyz=flat_g["xyz"], flat_rows=flat_g["row"], flat_cols=flat_g["col"],
        flat_curv=flat_g["curv"], flat_var=flat_g["var"], flat_sel=flat_sel,
        water_xyz=img.xyz[water_rows, water_cols].reshape(-1, 3),
        water_rows=water_rows.astype(np.int32),
        water_cols=water_cols.astype(np.int32),
    )
    return _sort_feature_set(fs)


def _nms(rows, cols, sectors, segs, order_key, keep_per_group, radius) -> np.ndarray:
    """Greedy per-(row, sector, segment) suppression; smaller key wins."""
    sel = np.zeros(rows.shape[0], dtype=bool)
    if rows.size == 0:
        return sel
    group = rows.astype(np.int64) * (N_COLS * 64) + sectors.astype(np.int64) * 64 + segs % 64
    order = np.lexsort((cols, order_key, group))
    kept_cols: dict[int, list[int]] = {}
    kept_n: dict[int, int] = {}
    for idx in order:
        g = group[idx]
        if kept_n.get(g, 0) >= keep_per_group:
            continue
        c = int(cols[idx])
        near = any(min(abs(c - kc), N_COLS - abs(c - kc)) <= radius for kc in kept_cols.get(g, ()))
        if near:
            continue
        sel[idx] = True
        kept_cols.setdefault(g, []).append(c)
        kept_n[g] = kept_n.get(g, 0) + 1
    return sel


def _sort_feature_set(fs: FeatureSet) -> FeatureSet:
    def order(rows, cols):
        return np.lexsort((cols, rows))

    o = order(fs.rough_rows, fs.rough_cols)
    fs.rough_xyz, fs.rough_rows, fs.rough_cols = fs.rough_xyz[o], fs.rough_rows[o], fs.rough_cols[o]
    fs.rough_curv, fs.rough_var, fs.rough_sel = fs.rough_curv[o], fs.rough_var[o], fs.rough_sel[o]
    o = order(fs.flat_rows, fs.flat_cols)
    fs.flat_xyz, fs.flat_rows, fs.flat_cols = fs.flat_xyz[o], fs.flat_rows[o], fs.flat_cols[o]
    fs.flat_curv, fs.flat_var, fs.flat_sel = fs.flat_curv[o], fs.flat_var[o], fs.flat_sel[o]
    o = order(fs.water_rows, fs.water_cols)
    fs.water_xyz, fs.water_rows, fs.water_cols = fs.water_xyz[o], fs.water_rows[o], fs.water_cols[o]
    return fs


def dump_features(fs: FeatureSet, path: str | Path) -> None:
    """Debug dump: one ``label x y z c r`` line per point."""
    lines = []
    for i in range(fs.rough_xyz.shape[0]):
        label = "edge" if fs.rough_sel[i] else "rough"
        x, y, z = fs.rough_xyz[i]
        lines.append(f"{label} {x:.6f} {y:.6f} {z:.6f} {fs.rough_curv[i]:.8f} {fs.rough_var[i]:.8f}")
    for i in range(fs.flat_xyz.shape[0]):
        x, y, z = fs.flat_xyz[i]
        lines.append(f"flat {x:.6f} {y:.6f} {z:.6f} {fs.flat_curv[i]:.8f} {fs.flat_var[i]:.8f}")
    for i in range(fs.water_xyz.shape[0]):
        x, y, z = fs.water_xyz[i]
        lines.append(f"water {x:.6f} {y:.6f} {z:.6f} 0 0")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
