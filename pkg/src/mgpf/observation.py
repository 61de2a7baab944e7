"""Hand-built observation model: a range scan becomes a Gaussian mixture over poses.

Pipeline: scan endpoints -> wall-shape filter -> RANSAC edge -> the four
Manhattan rotations -> cross-correlation with the wall grid -> threshold,
segment, and one Gaussian per segment.

The filter is anchored at the robot: each kernel cell is the offset from the
robot to a wall cell it saw. A correlation score at cell c therefore rates
the hypothesis "the robot stands in c", and segment centres are robot
positions without a separate back-projection step.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import EmptyObservationError
from .gaussian import wrap_angle
from .mixture import GaussianMixture
from .world import DepthScan, WallMap


@dataclass(frozen=True)
class ObservationParams:
    ransac_iterations: int = 200
    inlier_band_cells: float = 1.5
    min_inliers: int = 8
    threshold: float = 0.5
    sigma_pad_cm: float = 40.0
    sigma_theta: float = math.pi


@dataclass(frozen=True, eq=False)
class ScanFilter:
    """Wall shape seen by a scan, in the robot frame (x forward, cm)."""

    points: np.ndarray
    kernel: np.ndarray
    cell_size: float

    @property
    def wall_points(self) -> np.ndarray:
        # push each endpoint half a cell along its beam so it falls inside the wall cell
        r = np.linalg.norm(self.points, axis=1, keepdims=True)
        return self.points * (1.0 + 0.5 * self.cell_size / r)


@dataclass(frozen=True, eq=False)
class EdgeModel:
    point: np.ndarray
    direction: np.ndarray
    inliers: int
    inlier_mask: np.ndarray
    second: Optional["EdgeModel"] = None

    @property
    def angle(self) -> float:
        return math.atan2(self.direction[1], self.direction[0])


@dataclass(frozen=True, eq=False)
class MatchField:
    scores: np.ndarray  # (4, H, W)
    headings: np.ndarray  # implied robot heading per rotation
    offsets: tuple  # per rotation, (n, 2) integer (dx, dy) cell offsets robot -> wall


def rasterize(points: np.ndarray, cell_size: float) -> np.ndarray:
    """Unique integer cell offsets of robot-relative points."""
    cells = np.rint(points / cell_size).astype(int)
    return np.unique(cells, axis=0)


def scan_to_filter(scan: DepthScan, cell_size: float = 10.0) -> ScanFilter:
    hits = scan.hits
    if not hits.any():
        raise EmptyObservationError("no beam returned a wall")
    r, a = scan.ranges[hits], scan.angles[hits]
    points = np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
    f = ScanFilter(points, np.zeros((1, 1), dtype=bool), cell_size)
    offs = rasterize(f.wall_points, cell_size)
    R = int(np.abs(offs).max())
    kernel = np.zeros((2 * R + 1, 2 * R + 1), dtype=bool)
    kernel[R + offs[:, 1], R + offs[:, 0]] = True
    return ScanFilter(points, kernel, cell_size)


def _fit_line(points):
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid)
    return centroid, vt[0] / np.linalg.norm(vt[0])


def _line_distance(points, point, direction):
    normal = np.array([-direction[1], direction[0]])
    return np.abs((points - point) @ normal)


def fit_edges(f: ScanFilter, rng: np.random.Generator, params: ObservationParams = ObservationParams()) -> EdgeModel:
    """RANSAC line through the filter points, plus a perpendicular second edge when supported."""
    pts = f.points
    n = len(pts)
    band = params.inlier_band_cells * f.cell_size
    if n < params.min_inliers:
        raise EmptyObservationError(f"only {n} wall points, need {params.min_inliers}")
    i = rng.integers(n, size=params.ransac_iterations)
    j = rng.integers(n - 1, size=params.ransac_iterations)
    j = j + (j >= i)
    d = pts[j] - pts[i]
    length = np.linalg.norm(d, axis=1)
    valid = length > 1e-9
    normals = np.stack([-d[:, 1], d[:, 0]], axis=1) / np.where(valid, length, 1.0)[:, None]
    dist = np.abs(np.einsum("kd,knd->kn", normals, pts[None, :, :] - pts[i][:, None, :]))
    counts = np.where(valid, (dist < band).sum(axis=1), -1)
    best = int(np.argmax(counts))
    mask = dist[best] < band
    if mask.sum() < params.min_inliers:
        raise EmptyObservationError("no edge with enough inliers")
    point, direction = _fit_line(pts[mask])
    mask = _line_distance(pts, point, direction) < band
    if mask.sum() < params.min_inliers:
        raise EmptyObservationError("no edge with enough inliers")
    point, direction = _fit_line(pts[mask])
    # points of an adjoining wall inside the band tilt the fit; one tighter pass removes them
    tight = _line_distance(pts, point, direction) < 0.25 * band
    if tight.sum() >= params.min_inliers:
        point, direction = _fit_line(pts[tight])
    primary_count = int(mask.sum())

    second = None
    rest = pts[~mask]
    if len(rest) >= params.min_inliers:
        # perpendicular edge: its normal is the primary direction, one free offset
        proj = rest @ direction
        picks = rng.integers(len(rest), size=params.ransac_iterations)
        support = (np.abs(proj[None, :] - proj[picks][:, None]) < band).sum(axis=1)
        k = int(np.argmax(support))
        m2 = np.abs(proj - proj[picks[k]]) < band
        if m2.sum() >= params.min_inliers:
            offset = proj[m2].mean()
            perp = np.array([-direction[1], direction[0]])
            p2 = direction * offset + perp * float(np.mean(rest[m2] @ perp))
            full = np.zeros(n, dtype=bool)
            full[np.flatnonzero(~mask)[m2]] = True
            second = EdgeModel(p2, perp, int(m2.sum()), full)
    return EdgeModel(point, direction, primary_count, mask, second)


def rotate_and_convolve(f: ScanFilter, edge: EdgeModel, wall_map: WallMap) -> MatchField:
    """Score every map cell as a robot position under each Manhattan rotation.

    Rotation k turns the filter by heading_k = -edge_angle + k * 90deg so the
    fitted edge lies on a grid axis; the score of a cell is the number of
    rotated kernel cells that land on wall cells.
    """
    grid = wall_map.grid.astype(np.int32)
    H, W = grid.shape
    cs = wall_map.cell_size
    wall_pts = f.wall_points
    headings = wrap_angle(-edge.angle + np.arange(4) * (math.pi / 2.0))
    scores = np.zeros((4, H, W), dtype=np.int32)
    all_offsets = []
    for k, th in enumerate(headings):
        c, s = math.cos(th), math.sin(th)
        rot = wall_pts @ np.array([[c, s], [-s, c]])
        offs = rasterize(rot, cs)
        all_offsets.append(offs)
        R = int(np.abs(offs).max())
        padded = np.pad(grid, R)
        for ox, oy in offs:
            scores[k] += padded[R + oy: R + oy + H, R + ox: R + ox + W]
    return MatchField(scores, np.asarray(headings), tuple(all_offsets))


def extract_gaussians(fields: MatchField, wall_map: WallMap,
                      params: ObservationParams = ObservationParams()) -> GaussianMixture:
    """Threshold, segment (8-connected) and summarize each segment as a pose Gaussian."""
    cs = wall_map.cell_size
    structure = np.ones((3, 3), dtype=bool)
    means, sigmas, weights = [], [], []
    for score, heading in zip(fields.scores, fields.headings):
        s = np.where(wall_map.grid, 0, score).astype(float)
        peak = s.max()
        if peak <= 0:
            continue
        labels, n = ndimage.label(s >= params.threshold * peak, structure=structure)
        iy, ix = np.nonzero(labels)
        lab = labels[iy, ix]
        order = np.lexsort((ix, iy, lab))  # row-major within each segment
        iy, ix, lab = iy[order], ix[order], lab[order]
        bounds = np.flatnonzero(np.diff(lab)) + 1
        for sy, sx in zip(np.split(iy, bounds), np.split(ix, bounds)):
            vals = s[sy, sx]
            top = int(np.argmax(vals))
            spread = np.hypot(sx - sx[top], sy - sy[top]).max() * cs
            cx, cy = wall_map.cell_center(sx[top], sy[top])
            means.append((cx, cy, heading))
            sigmas.append(spread + params.sigma_pad_cm)
            weights.append(vals[top])
    if not means:
        raise EmptyObservationError("no positive match score")
    sig = np.asarray(sigmas)
    covs = np.zeros((len(sig), 3, 3))
    covs[:, 0, 0] = covs[:, 1, 1] = sig**2
    covs[:, 2, 2] = params.sigma_theta**2
    w = np.asarray(weights, float)
    return GaussianMixture(np.asarray(means, float), covs, np.log(w / w.sum()), exponential=True)


def observe(scan: DepthScan, wall_map: WallMap, rng: np.random.Generator,
            params: ObservationParams = ObservationParams()) -> Optional[GaussianMixture]:
    """Full pipeline; returns None when the scan gives no usable evidence."""
    try:
        f = scan_to_filter(scan, wall_map.cell_size)
        edge = fit_edges(f, rng, params)
        fields = rotate_and_convolve(f, edge, wall_map)
        return extract_gaussians(fields, wall_map, params)
    except EmptyObservationError:
        return None


def write_debug_csv(path, step: int, fields: Optional[MatchField], mixture: Optional[GaussianMixture]):
    """Append one step's nonzero match scores and extracted Gaussians to a CSV file."""
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if fields is not None:
            for k, score in enumerate(fields.scores):
                iy, ix = np.nonzero(score)
                for a, b in zip(ix, iy):
                    w.writerow([step, "field", k, int(a), int(b), int(score[b, a]), "", ""])
        if mixture is not None:
            for m, c, lw in zip(mixture.means, mixture.covs, mixture.log_weights):
                w.writerow([step, "gaussian", "", f"{m[0]:.6f}", f"{m[1]:.6f}", f"{m[2]:.6f}",
                            f"{math.sqrt(c[0, 0]):.6f}", f"{math.exp(lw):.9f}"])
