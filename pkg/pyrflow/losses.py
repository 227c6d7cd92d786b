"""Hierarchical supervised loss and the two domain adaptive losses."""

from dataclasses import dataclass
from typing import Optional, Sequence
import torch
from .data import downsample_gt
from .geometry import NeighborSet, knn_radius
from .io import Logger, LossConfig
from .network import FlowOutput


@dataclass
class LossTerms:
    """The weighted total and its three components."""

    total: torch.Tensor
    supervised: torch.Tensor
    lfc: torch.Tensor
    cfs: torch.Tensor

    def as_dict(self) -> dict:
        return {
            "loss": float(self.total.detach()),
            "supervised": float(self.supervised.detach()),
            "lfc": float(self.lfc.detach()),
            "cfs": float(self.cfs.detach()),
        }


def _masked_mean(values: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    if mask is None:
        return values.mean()
    mask = mask.to(torch.bool)
    if not bool(mask.any()):
        return values.sum() * 0.0
    return values[mask].mean()


def _group_mean(
    values: torch.Tensor, valid: torch.Tensor, name: str
) -> torch.Tensor:
    """Mean over the non-empty groups of the mean over each group."""
    valid = valid.to(values.dtype)
    counts = valid.sum(dim=1)
    filled = counts > 0
    if not bool(filled.any()):
        Logger.logger.warning(
            f"Every {name} neighbor group is empty, the loss is set to zero"
        )
        return values.sum() * 0.0
    group_means = (values * valid).sum(dim=1)[filled] / counts[filled]
    return group_means.mean()


def supervised_loss(
    pred_flows: Sequence[torch.Tensor],
    gt_flows: Sequence[torch.Tensor],
    deltas: Sequence[float],
    masks: Optional[Sequence[Optional[torch.Tensor]]] = None,
) -> torch.Tensor:
    """Weighted sum over levels of the mean end point error.

    Args:
        pred_flows (Sequence[torch.Tensor]): Predicted flow per level, finest first.
        gt_flows (Sequence[torch.Tensor]): Ground truth flow per level.
        deltas (Sequence[float]): Weight of each level.
        masks (Sequence[torch.Tensor], optional): Per-level validity masks;
            masked points do not contribute.

    Raises:
        ValueError: If the level counts or the per-level shapes disagree.

    Returns:
        torch.Tensor: The loss (scalar).
    """
    if not len(pred_flows) == len(gt_flows) == len(deltas):
        raise ValueError(
            f"got {len(pred_flows)} predicted levels, {len(gt_flows)} ground truth "
            f"levels and {len(deltas)} weights"
        )
    if masks is None:
        masks = [None] * len(pred_flows)

    loss = pred_flows[0].new_zeros(())
    levels = zip(pred_flows, gt_flows, deltas, masks)
    for level, (pred, gt, delta, mask) in enumerate(levels):
        if pred.shape != gt.shape:
            raise ValueError(
                f"level {level}: prediction {tuple(pred.shape)} and ground truth "
                f"{tuple(gt.shape)} differ"
            )
        error = torch.linalg.norm(gt - pred, dim=-1)
        loss = loss + delta * _masked_mean(error, mask)
    return loss


def lfc_loss(
    flow: torch.Tensor, neighbors: NeighborSet, mask: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Local flow consistency: mean flow difference inside radius groups.

    The point itself is not counted as its own neighbor. Points with an
    empty group are skipped.

    Args:
        flow (torch.Tensor): Full resolution flow [N, 3].
        neighbors (NeighborSet): Radius groups of the source frame in itself.
        mask (torch.Tensor, optional): Validity of each point [N]; masked
            points neither hold nor join a group.

    Returns:
        torch.Tensor: The loss (scalar).
    """
    if neighbors.query_count != flow.shape[0]:
        raise ValueError(
            f"{neighbors.query_count} groups for {flow.shape[0]} flow vectors"
        )
    idx = neighbors.indices
    own = torch.arange(idx.shape[0], device=idx.device)[:, None]
    valid = neighbors.valid & (idx != own)
    if mask is not None:
        mask = mask.to(torch.bool)
        valid = valid & mask[idx] & mask[:, None]

    difference = torch.linalg.norm(flow[:, None, :] - flow[idx], dim=-1)
    return _group_mean(difference, valid, "LFC")


def cosine_similarity(
    a: torch.Tensor, b: torch.Tensor, eps: float = 1e-8
) -> torch.Tensor:
    """Cosine similarity along the last axis, ``eps`` added to the denominator."""
    dot = (a * b).sum(dim=-1)
    return dot / (torch.linalg.norm(a, dim=-1) * torch.linalg.norm(b, dim=-1) + eps)


def similarity_penalty(x: torch.Tensor) -> torch.Tensor:
    """``F(x) = -x`` for negative ``x``, zero otherwise."""
    return torch.relu(-x)


def cfs_loss(
    source_features: torch.Tensor,
    target_features: torch.Tensor,
    neighbors: NeighborSet,
    threshold: float = 0.95,
    eps: float = 1e-8,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Cross-frame feature similarity penalty.

    Every source feature is compared with the target features inside the
    radius group of its ground-truth warped position; similarities below
    ``threshold`` are penalized linearly.

    Args:
        source_features (torch.Tensor): Re-embedded source features [N, d].
        target_features (torch.Tensor): Target features [M, d].
        neighbors (NeighborSet): Groups of the GT-warped source points in
            the target frame.
        threshold (float): Similarity threshold in (0, 1].
        eps (float): Denominator regularizer.
        mask (torch.Tensor, optional): Validity of each source point [N].

    Returns:
        torch.Tensor: The loss (scalar).
    """
    if source_features.shape[1] != target_features.shape[1]:
        raise ValueError(
            f"source width {source_features.shape[1]} and target width "
            f"{target_features.shape[1]} differ"
        )
    if neighbors.query_count != source_features.shape[0]:
        raise ValueError(
            f"{neighbors.query_count} groups for {source_features.shape[0]} source features"
        )
    idx = neighbors.indices
    valid = neighbors.valid
    if mask is not None:
        valid = valid & mask.to(torch.bool)[:, None]

    similarity = cosine_similarity(
        source_features[:, None, :], target_features[idx], eps
    )
    return _group_mean(similarity_penalty(similarity - threshold), valid, "CFS")


def total_loss(
    sup: torch.Tensor,
    lfc: torch.Tensor,
    cfs: torch.Tensor,
    lambdas: Sequence[float] = (0.7, 0.15, 0.15),
) -> torch.Tensor:
    """``lambda_1 * sup + lambda_2 * lfc + lambda_3 * cfs``."""
    return lambdas[0] * sup + lambdas[1] * lfc + lambdas[2] * cfs


def compute_losses(
    output: FlowOutput,
    gt_flow: torch.Tensor,
    config: LossConfig,
    mask: Optional[torch.Tensor] = None,
) -> LossTerms:
    """Evaluate every loss of a network output against its ground truth.

    Args:
        output (FlowOutput): The network output.
        gt_flow (torch.Tensor): Ground truth flow [N, 3] of the source frame.
        config (LossConfig): Loss weights and neighborhood parameters.
        mask (torch.Tensor, optional): Source validity mask [N].

    Returns:
        LossTerms: The total and its components. Terms with a zero weight
        are not evaluated and reported as zero.
    """
    source = output.source[0].positions
    target = output.target[0].positions
    lambdas = config.effective_lambdas
    levels = len(output.levels)

    gt_levels = downsample_gt(gt_flow, output.source)
    masks = None
    if mask is not None:
        masks = downsample_gt(mask, output.source)
    sup = supervised_loss(output.flows, gt_levels, config.deltas_for(levels), masks)

    zero = sup.new_zeros(())
    lfc = cfs = zero
    if lambdas[1] > 0:
        k = min(config.k, source.shape[0])
        neighbors = knn_radius(source, source, k, config.radius)
        lfc = lfc_loss(output.flow, neighbors, mask)
    if lambdas[2] > 0:
        finest = output.levels[0]
        target_features = finest.target_features
        if config.cfs_target_features == "raw" or target_features is None:
            target_features = output.target[0].features
        warped = (source + gt_flow).detach()
        k = min(config.k, target.shape[0])
        neighbors = knn_radius(warped, target, k, config.radius)
        cfs = cfs_loss(
            finest.features,
            target_features,
            neighbors,
            config.threshold,
            config.eps,
            mask,
        )

    return LossTerms(total_loss(sup, lfc, cfs, lambdas), sup, lfc, cfs)
