"""Functions to compute the scene flow evaluation metrics and the
neighborhood-search consistency analysis."""

import json
from dataclasses import dataclass, asdict
from typing import List, Optional, Sequence, Tuple
import numpy as np
from scipy.spatial.distance import cdist

# thresholds in meters, pixels and fractions of the ground truth magnitude
STRICT_3D = 0.05
RELAXED_3D = 0.1
OUTLIER_3D = 0.3
STRICT_REL = 0.05
RELAXED_REL = 0.1
OUTLIER_REL = 0.3
ACC_2D = 3.0
ACC_2D_REL = 0.05
EPS = 1e-8


@dataclass
class MetricReport:
    """The six benchmark metrics of a set of points.

    2D metrics are ``None`` when no camera matrix was available.
    """

    epe3d: float
    as3d: float
    ar3d: float
    out3d: float
    epe2d: Optional[float] = None
    acc2d: Optional[float] = None
    count: int = 0
    count2d: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        """Flat ``name: value`` record, one metric per line."""
        lines = []
        for key, value in self.as_dict().items():
            if value is None:
                continue
            if isinstance(value, int):
                lines.append(f"{key}: {value}")
            else:
                lines.append(f"{key}: {value:.6f}")
        return "\n".join(lines)

    def to_record(self, **extra) -> str:
        """One JSON line, with ``extra`` fields (e.g. the scene name) first."""
        record = dict(extra)
        record.update(self.as_dict())
        return json.dumps(record)


def project_pinhole(
    points: np.ndarray, intrinsics: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points to pixel coordinates.

    Args:
        points (np.ndarray): Points [N, 3] in the camera frame.
        intrinsics (np.ndarray): Camera matrix [3, 3].

    Returns:
        Tuple[np.ndarray, np.ndarray]: Pixels [N, 2] (NaN where invalid) and
        the validity flags [N], False for non-positive depth.
    """
    points = np.asarray(points, dtype=np.float64)
    intrinsics = np.asarray(intrinsics, dtype=np.float64)
    if intrinsics.shape != (3, 3):
        raise ValueError(
            f"intrinsics must be a 3x3 matrix, got shape {intrinsics.shape}"
        )

    fx, fy = intrinsics[0, 0], intrinsics[1, 1]
    cx, cy = intrinsics[0, 2], intrinsics[1, 2]
    z = points[:, 2]
    valid = z > 0
    pixels = np.full((points.shape[0], 2), np.nan)
    pixels[valid, 0] = fx * points[valid, 0] / z[valid] + cx
    pixels[valid, 1] = fy * points[valid, 1] / z[valid] + cy
    return pixels, valid


def compute_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    mask: Optional[np.ndarray] = None,
    intrinsics: Optional[np.ndarray] = None,
    positions: Optional[np.ndarray] = None,
    with_2d: Optional[bool] = None,
) -> MetricReport:
    """Compute the 3D and (optionally) 2D scene flow metrics.

    A point counts as accurate when either its absolute or its relative
    error is below the threshold, and as an outlier when either is above.

    Args:
        pred (np.ndarray): Predicted flow [N, 3].
        gt (np.ndarray): Ground truth flow [N, 3].
        mask (np.ndarray, optional): Validity [N]; zeros are excluded.
        intrinsics (np.ndarray, optional): Camera matrix for the 2D metrics.
        positions (np.ndarray, optional): Source points [N, 3], needed for
            the 2D metrics.
        with_2d (bool, optional): Request the 2D metrics; defaults to
            whether ``intrinsics`` is given.

    Raises:
        ValueError: If the shapes disagree or 2D metrics are requested
            without a camera matrix or source points.

    Returns:
        MetricReport: The metrics over the valid points.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} must both be [N, 3]")
    if with_2d is None:
        with_2d = intrinsics is not None
    if with_2d and (intrinsics is None or positions is None):
        raise ValueError(
            "2D metrics need both the camera intrinsics and the source positions"
        )

    keep = np.ones(len(gt), dtype=bool)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != (len(gt),):
            raise ValueError(f"mask must have shape ({len(gt)},), got {mask.shape}")
        keep = mask.astype(bool)

    error = np.linalg.norm(pred[keep] - gt[keep], axis=1)
    relative = error / (np.linalg.norm(gt[keep], axis=1) + EPS)
    count = int(keep.sum())
    if count == 0:
        report = MetricReport(0.0, 0.0, 0.0, 0.0, count=0)
    else:
        report = MetricReport(
            epe3d=float(error.mean()),
            as3d=float(np.mean((error < STRICT_3D) | (relative < STRICT_REL))),
            ar3d=float(np.mean((error < RELAXED_3D) | (relative < RELAXED_REL))),
            out3d=float(np.mean((error > OUTLIER_3D) | (relative > OUTLIER_REL))),
            count=count,
        )

    if with_2d:
        positions = np.asarray(positions, dtype=np.float64)[keep]
        origin, valid0 = project_pinhole(positions, intrinsics)
        px_gt, valid1 = project_pinhole(positions + gt[keep], intrinsics)
        px_pred, valid2 = project_pinhole(positions + pred[keep], intrinsics)
        valid = valid0 & valid1 & valid2
        error2d = np.linalg.norm(px_pred[valid] - px_gt[valid], axis=1)
        motion2d = np.linalg.norm(px_gt[valid] - origin[valid], axis=1)
        relative2d = error2d / (motion2d + EPS)
        report.count2d = int(valid.sum())
        if report.count2d:
            report.epe2d = float(error2d.mean())
            report.acc2d = float(np.mean((error2d < ACC_2D) | (relative2d < ACC_2D_REL)))
        else:
            report.epe2d, report.acc2d = 0.0, 0.0

    return report


def merge_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Pool per-scene reports into a per-point report.

    3D metrics are weighted by ``count`` and 2D metrics by ``count2d``.
    """
    total = sum(r.count for r in reports)
    if total == 0:
        return MetricReport(0.0, 0.0, 0.0, 0.0, count=0)
    merged = MetricReport(
        **{
            key: sum(getattr(r, key) * r.count for r in reports) / total
            for key in ("epe3d", "as3d", "ar3d", "out3d")
        },
        count=total,
    )
    with_2d = [r for r in reports if r.epe2d is not None]
    total2d = sum(r.count2d for r in with_2d)
    if with_2d:
        merged.count2d = total2d
        merged.epe2d = sum(r.epe2d * r.count2d for r in with_2d) / max(total2d, 1)
        merged.acc2d = sum(r.acc2d * r.count2d for r in with_2d) / max(total2d, 1)
    return merged


def neighbor_groups(
    positions: np.ndarray, k: int, radius: Optional[float] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """K nearest neighbors of every point in its own set, self excluded.

    Args:
        positions (np.ndarray): Points [N, 3].
        k (int): Group size, at most N - 1.
        radius (float, optional): Keep only members closer than ``radius``.

    Returns:
        Tuple[np.ndarray, np.ndarray]: Indices [N, k] and validity [N, k].
    """
    n = len(positions)
    if not 1 <= k < n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    distances = cdist(positions, positions)
    np.fill_diagonal(distances, np.inf)
    order = np.argsort(distances, axis=1, kind="stable")[:, :k]
    valid = np.ones(order.shape, dtype=bool)
    if radius is not None:
        valid = np.take_along_axis(distances, order, axis=1) < radius
    return order, valid


def local_flow_difference(
    flow: np.ndarray, indices: np.ndarray, valid: np.ndarray
) -> float:
    """Mean over non-empty groups of the mean flow difference in the group.

    Args:
        flow (np.ndarray): Flow vectors [N, 3].
        indices (np.ndarray): Group members [N, k].
        valid (np.ndarray): Member validity [N, k].

    Returns:
        float: The local difference, 0 when every group is empty.
    """
    difference = np.linalg.norm(flow[:, None, :] - flow[indices], axis=-1)
    counts = valid.sum(axis=1)
    filled = counts > 0
    if not filled.any():
        return 0.0
    return float(np.mean((difference * valid).sum(axis=1)[filled] / counts[filled]))


@dataclass
class SearchReport:
    """Local ground truth flow difference under KNN and KNN+radius groups."""

    k: int
    radius: float
    knn_difference: float
    radius_difference: float
    retained_fraction: float
    isolated_fraction: float

    def as_dict(self) -> dict:
        return asdict(self)


def search_consistency(
    positions: np.ndarray, flow: np.ndarray, k: int, radius: float
) -> SearchReport:
    """Compare the two neighborhood searches on one ground truth flow field.

    Args:
        positions (np.ndarray): Source points [N, 3].
        flow (np.ndarray): Ground truth flow [N, 3].
        k (int): Group size.
        radius (float): Truncation radius.

    Returns:
        SearchReport: The comparison.
    """
    indices, within = neighbor_groups(positions, k, radius)
    full = np.ones_like(within)
    return SearchReport(
        k=k,
        radius=radius,
        knn_difference=local_flow_difference(flow, indices, full),
        radius_difference=local_flow_difference(flow, indices, within),
        retained_fraction=float(within.mean()),
        isolated_fraction=float(np.mean(~within.any(axis=1))),
    )


def search_grid(
    scenes: Sequence[Tuple[np.ndarray, np.ndarray]],
    ks: Sequence[int],
    radii: Sequence[float],
) -> List[SearchReport]:
    """Average :func:`search_consistency` over scenes on a K x R grid.

    Args:
        scenes (Sequence[Tuple[np.ndarray, np.ndarray]]): (positions, flow) pairs.
        ks (Sequence[int]): Group sizes.
        radii (Sequence[float]): Radii.

    Returns:
        List[SearchReport]: One averaged report per (k, radius), k-major.
    """
    grid = []
    for k in ks:
        for radius in radii:
            reports = [search_consistency(p, f, k, radius) for p, f in scenes]
            values = {
                key: float(np.mean([getattr(r, key) for r in reports]))
                for key in (
                    "knn_difference",
                    "radius_difference",
                    "retained_fraction",
                    "isolated_fraction",
                )
            }
            grid.append(SearchReport(k=k, radius=radius, **values))
    return grid
