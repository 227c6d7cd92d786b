"""Brute-force point cloud geometry kernels.

Every search here is exhaustive and deterministic: ties are broken by the
smaller index, so results are reproducible across runs and match a naive
loop implementation index for index.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple
import torch

# queries per block when building distance matrices
CHUNK_SIZE = 1024


@dataclass(frozen=True)
class NeighborSet:
    """Neighbor groups of a set of query points inside a reference set.

    Groups are stored padded to ``k_max`` columns. ``valid[i, j]`` is False for
    padding slots, which only occur when ``radius`` is set. Valid slots always
    form a prefix of each row since members are sorted by distance.
    """

    indices: torch.Tensor
    valid: torch.Tensor
    radius: Optional[float] = None

    @property
    def query_count(self) -> int:
        return self.indices.shape[0]

    @property
    def k_max(self) -> int:
        return self.indices.shape[1]

    def sizes(self) -> torch.Tensor:
        """Number of members of each group."""
        return self.valid.sum(dim=1)

    def groups(self) -> List[List[int]]:
        """The groups as plain index lists."""
        return [
            row[mask].tolist() for row, mask in zip(self.indices.cpu(), self.valid.cpu())
        ]


def check_points(points: torch.Tensor, name: str = "points") -> None:
    """Validate a point set: shape [n, 3], n >= 1, finite coordinates.

    Args:
        points (torch.Tensor): The point set.
        name (str): Name used in the error message.

    Raises:
        ValueError: If the point set is malformed.
    """
    if points.dim() != 2 or points.shape[1] != 3:
        raise ValueError(f"{name} must have shape [n, 3], got {tuple(points.shape)}")
    if points.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one point")
    if not torch.isfinite(points).all():
        raise ValueError(f"{name} contains non-finite coordinates")


def square_distance(query: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance between every query and reference point.

    Differences are summed coordinate by coordinate (not through the
    ``|a|^2 + |b|^2 - 2ab`` expansion) so that equal distances compare equal.

    Args:
        query (torch.Tensor): Points [Q, 3].
        reference (torch.Tensor): Points [R, 3].

    Returns:
        torch.Tensor: Squared distances [Q, R].
    """
    diff = query[:, None, :] - reference[None, :, :]
    return (diff * diff).sum(dim=-1)


def fps(points: torch.Tensor, m: int, seed_index: int = 0) -> torch.Tensor:
    """Farthest point sampling.

    Args:
        points (torch.Tensor): Point set [n, 3].
        m (int): Number of points to select.
        seed_index (int): Index of the first selected point.

    Raises:
        ValueError: If ``m`` is not in [1, n] or the seed is out of range.

    Returns:
        torch.Tensor: ``m`` distinct indices (long), starting with the seed.
    """
    check_points(points)
    n = points.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"m must be in [1, {n}], got {m}")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index must be in [0, {n}), got {seed_index}")

    points = points.detach()
    selected = torch.empty(m, dtype=torch.long)
    min_dist = torch.full((n,), math.inf, dtype=points.dtype, device=points.device)
    current = seed_index
    for i in range(m):
        selected[i] = current
        diff = points - points[current]
        min_dist = torch.minimum(min_dist, (diff * diff).sum(dim=-1))
        # selected points drop below every candidate, argmax takes the first maximum
        min_dist[current] = -1.0
        current = int(torch.argmax(min_dist))
    return selected.to(points.device)


def knn(query: torch.Tensor, reference: torch.Tensor, k: int) -> NeighborSet:
    """K nearest neighbors of each query point among the reference points.

    Args:
        query (torch.Tensor): Query points [Q, 3].
        reference (torch.Tensor): Reference points [R, 3].
        k (int): Group size.

    Raises:
        ValueError: If ``k`` is not in [1, R].

    Returns:
        NeighborSet: Groups sorted by (distance, index).
    """
    indices, _ = _sorted_neighbors(query, reference, k)
    valid = torch.ones_like(indices, dtype=torch.bool)
    return NeighborSet(indices=indices, valid=valid)


def knn_radius(
    query: torch.Tensor, reference: torch.Tensor, k: int, r: float
) -> NeighborSet:
    """K nearest neighbors truncated to a strict radius.

    Members at distance ``>= r`` are dropped; groups may become empty.
    ``r = math.inf`` reproduces :func:`knn`.

    Args:
        query (torch.Tensor): Query points [Q, 3].
        reference (torch.Tensor): Reference points [R, 3].
        k (int): Maximum group size.
        r (float): Radius in scene units.

    Raises:
        ValueError: If ``k`` is not in [1, R] or ``r <= 0``.

    Returns:
        NeighborSet: The truncated groups.
    """
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    indices, sq_dist = _sorted_neighbors(query, reference, k)
    valid = sq_dist.sqrt() < r
    return NeighborSet(indices=indices, valid=valid, radius=float(r))


def _sorted_neighbors(
    query: torch.Tensor, reference: torch.Tensor, k: int
) -> Tuple[torch.Tensor, torch.Tensor]:
    check_points(query, "query")
    check_points(reference, "reference")
    n_ref = reference.shape[0]
    if not 1 <= k <= n_ref:
        raise ValueError(f"k must be in [1, {n_ref}], got {k}")

    query = query.detach()
    reference = reference.detach()
    indices, distances = [], []
    for start in range(0, query.shape[0], CHUNK_SIZE):
        sq_dist = square_distance(query[start : start + CHUNK_SIZE], reference)
        # a stable sort keeps the smaller index first among equal distances
        values, order = torch.sort(sq_dist, dim=1, stable=True)
        indices.append(order[:, :k])
        distances.append(values[:, :k])
    return torch.cat(indices), torch.cat(distances)


def group_relative(
    reference: torch.Tensor,
    reference_features: torch.Tensor,
    neighbors: NeighborSet,
    query: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Gather neighbor positions relative to their query and neighbor features.

    Args:
        reference (torch.Tensor): Reference points [R, 3].
        reference_features (torch.Tensor): Reference features [R, C].
        neighbors (NeighborSet): Groups of each query in the reference set.
        query (torch.Tensor): Query points [Q, 3].

    Raises:
        ValueError: If the shapes are inconsistent.

    Returns:
        Tuple[torch.Tensor, torch.Tensor]: Relative positions [Q, K, 3] and
        neighbor features [Q, K, C]. Padding slots hold the values of the
        unfiltered neighbor and must be masked with ``neighbors.valid``.
    """
    rows = reference.shape[0]
    if reference_features.dim() != 2 or reference_features.shape[0] != rows:
        raise ValueError(
            f"reference_features must have {reference.shape[0]} rows, "
            f"got shape {tuple(reference_features.shape)}"
        )
    if neighbors.query_count != query.shape[0]:
        raise ValueError(
            f"neighbors has {neighbors.query_count} groups for {query.shape[0]} queries"
        )
    if neighbors.indices.numel() and int(neighbors.indices.max()) >= reference.shape[0]:
        raise ValueError("neighbor index out of range of the reference set")

    relative = reference[neighbors.indices] - query[:, None, :]
    return relative, reference_features[neighbors.indices]


def inverse_distance_upsample(
    coarse: torch.Tensor,
    coarse_values: torch.Tensor,
    fine: torch.Tensor,
    k: int = 3,
    eps: float = 1e-8,
) -> torch.Tensor:
    """Interpolate values from coarse points to fine points.

    Each fine value is the average of its ``k`` nearest coarse values weighted
    by ``1 / (d + eps)``. The weights do not depend on ``coarse_values``, so
    the result is linear and differentiable in them.

    Args:
        coarse (torch.Tensor): Coarse points [Nc, 3].
        coarse_values (torch.Tensor): Values at the coarse points [Nc, C].
        fine (torch.Tensor): Fine points [Nf, 3].
        k (int): Number of coarse neighbors.
        eps (float): Distance regularizer.

    Raises:
        ValueError: If the coarse set is empty, ``k`` is too large or ``eps <= 0``.

    Returns:
        torch.Tensor: Interpolated values [Nf, C].
    """
    if coarse.dim() != 2 or coarse.shape[0] == 0:
        raise ValueError("coarse point set is empty")
    if coarse_values.shape[0] != coarse.shape[0]:
        raise ValueError(
            f"coarse_values must have {coarse.shape[0]} rows, got {coarse_values.shape[0]}"
        )
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")

    neighbors = knn(fine, coarse, k)
    with torch.no_grad():
        relative = coarse[neighbors.indices] - fine[:, None, :]
        weights = 1.0 / (torch.linalg.norm(relative, dim=-1) + eps)
        weights = weights / weights.sum(dim=1, keepdim=True)
    weights = weights.to(coarse_values.dtype)
    return (weights[..., None] * coarse_values[neighbors.indices]).sum(dim=1)
