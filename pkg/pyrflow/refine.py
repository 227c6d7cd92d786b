"""Per-level residual flow refinement.

A refinement level upsamples the coarser flow, warps the source level with
it, recomputes the warped-frame features against the frame itself (spatial)
and against the target frame (temporal), builds a patch-to-patch cost volume
and predicts a residual flow that is added to the upsampled estimate.
"""

from dataclasses import dataclass
from typing import Optional, Tuple
import torch
import torch.nn as nn
from .backbone import Mlp, PointConv, PyramidLevel, WeightNet
from .fusion import position_encoding
from .geometry import NeighborSet, inverse_distance_upsample, knn
from .io import ModelConfig


@dataclass
class WarpedFrame:
    """Warped source positions and the features attached to them."""

    positions: torch.Tensor
    features: torch.Tensor


@dataclass
class ReembedOutput:
    """Aggregated features [N, d], target-point features [M, d] and the
    per-pair aggregation weights [N, k]."""

    features: torch.Tensor
    target_features: torch.Tensor
    weights: torch.Tensor


@dataclass
class LevelOutput:
    """Everything a refinement level produces."""

    flow: torch.Tensor
    residual: torch.Tensor
    upsampled_flow: torch.Tensor
    features: torch.Tensor
    target_features: Optional[torch.Tensor]
    warped_positions: torch.Tensor


def warp(positions: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Move the points along their flow vectors.

    Args:
        positions (torch.Tensor): Points [N, 3].
        flow (torch.Tensor): Flow vectors [N, 3].

    Raises:
        ValueError: If the lengths differ.

    Returns:
        torch.Tensor: Warped points [N, 3].
    """
    if positions.shape != flow.shape:
        raise ValueError(
            f"positions {tuple(positions.shape)} and flow {tuple(flow.shape)} differ in shape"
        )
    return positions + flow


def upsample_flow_and_features(
    coarse_level: PyramidLevel,
    fine_level: PyramidLevel,
    coarse_flow: torch.Tensor,
    coarse_features: Optional[torch.Tensor] = None,
    k: int = 3,
    eps: float = 1e-8,
) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Interpolate the coarse flow (and features) onto the finer level.

    Returns:
        Tuple[torch.Tensor, Optional[torch.Tensor]]: Fine flow [N_f, 3] and
        fine features [N_f, C], or ``None`` when no features were given.
    """
    k = min(k, coarse_level.size)
    fine_flow = inverse_distance_upsample(
        coarse_level.positions, coarse_flow, fine_level.positions, k, eps
    )
    fine_features = None
    if coarse_features is not None:
        fine_features = inverse_distance_upsample(
            coarse_level.positions, coarse_features, fine_level.positions, k, eps
        )
    return fine_flow, fine_features


class Reembedding(nn.Module):
    """Attentive re-embedding of warped points against a grouped point set.

    Each pair (i, j) of a warped point and one of its group members is
    embedded as ``TRF_ij = MLP(g'_j, f_i, PE_ij)`` where ``g'_j`` is the
    member feature after a per-point embedding layer. A scalar score
    ``MLP(TRF_ij, MLP(PE_ij))`` is normalized over the group and the
    embeddings are summed with these weights.

    Args:
        source_channels (int): Width of the warped-frame features f.
        target_channels (int): Width of the group member features g.
        out_channels (int): Width d of the result.
        position_width (int): Width of the position encoding MLP.
        negative_slope (float): Slope of the leaky rectifiers.
    """

    def __init__(
        self,
        source_channels: int,
        target_channels: int,
        out_channels: int,
        position_width: int,
        negative_slope: float = 0.1,
    ):
        super().__init__()
        self.target_embed = Mlp(
            target_channels, [out_channels], negative_slope=negative_slope
        )
        self.pair_mlp = Mlp(
            out_channels + source_channels + 9,
            [out_channels, out_channels],
            negative_slope=negative_slope,
        )
        self.position_mlp = Mlp(9, [position_width], negative_slope=negative_slope)
        self.score_mlp = Mlp(
            out_channels + position_width,
            [out_channels, 1],
            last_activation=False,
            negative_slope=negative_slope,
        )
        self.out_channels = out_channels

    def forward(
        self,
        warped: WarpedFrame,
        group_positions: torch.Tensor,
        group_features: torch.Tensor,
        neighbors: NeighborSet,
    ) -> ReembedOutput:
        if not bool(neighbors.valid.all()):
            raise ValueError("re-embedding needs fixed-size neighbor groups")
        if neighbors.query_count != warped.positions.shape[0]:
            raise ValueError(
                f"{neighbors.query_count} groups for {warped.positions.shape[0]} warped points"
            )

        target_features = self.target_embed(group_features)
        idx = neighbors.indices
        members = target_features[idx]
        own = warped.features[:, None, :].expand(-1, idx.shape[1], -1)
        encoding = position_encoding(warped.positions, group_positions[idx])

        trf = self.pair_mlp(torch.cat([members, own, encoding], dim=-1))
        scores = self.score_mlp(torch.cat([trf, self.position_mlp(encoding)], dim=-1))
        weights = torch.softmax(scores.squeeze(-1), dim=1)
        features = (weights[..., None] * trf).sum(dim=1)
        return ReembedOutput(features, target_features, weights)


class SpatialTemporalReembedding(nn.Module):
    """Temporal and spatial re-embedding of a warped frame and their fusion.

    A disabled branch passes the warped-frame features through unchanged.
    """

    def __init__(
        self,
        channels: int,
        k: int = 16,
        position_width: int = 32,
        use_spatial: bool = True,
        use_temporal: bool = True,
        negative_slope: float = 0.1,
    ):
        super().__init__()
        self.k = k
        self.use_spatial = use_spatial
        self.use_temporal = use_temporal
        self.temporal = None
        self.spatial = None
        reembed = (channels, channels, channels, position_width, negative_slope)
        if use_temporal:
            self.temporal = Reembedding(*reembed)
        if use_spatial:
            self.spatial = Reembedding(*reembed)
        self.fuse = Mlp(2 * channels, [channels], negative_slope=negative_slope)

    def temporal_reembed(
        self, warped: WarpedFrame, target_level: PyramidLevel
    ) -> ReembedOutput:
        """Re-embed the warped points against their K nearest target points."""
        neighbors = knn(warped.positions, target_level.positions, self.k)
        return self.temporal(
            warped, target_level.positions, target_level.features, neighbors
        )

    def spatial_reembed(self, warped: WarpedFrame) -> ReembedOutput:
        """Re-embed the warped points against their own K nearest neighbors."""
        neighbors = knn(warped.positions, warped.positions, self.k)
        return self.spatial(warped, warped.positions, warped.features, neighbors)

    def str_fuse(self, trf: torch.Tensor, srf: torch.Tensor) -> torch.Tensor:
        if trf.shape != srf.shape:
            raise ValueError(f"cannot fuse {tuple(trf.shape)} with {tuple(srf.shape)}")
        return self.fuse(torch.cat([trf, srf], dim=-1))

    def forward(
        self, warped: WarpedFrame, target_level: PyramidLevel
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Return the fused features and the updated target features
        (``None`` when the temporal branch is disabled)."""
        if not (self.use_spatial or self.use_temporal):
            return warped.features, None

        target_features = None
        trf = srf = warped.features
        if self.use_temporal:
            temporal = self.temporal_reembed(warped, target_level)
            trf, target_features = temporal.features, temporal.target_features
        if self.use_spatial:
            srf = self.spatial_reembed(warped).features
        return self.str_fuse(trf, srf), target_features


class CostVolume(nn.Module):
    """Patch-to-patch cost between the warped frame and the target frame.

    The point cost of a warped point sums the gated costs of its K nearest
    target points; the patch cost sums the gated point costs of its K nearest
    warped neighbors. Gates are per-channel outputs of weight nets over the
    direction vectors.
    """

    def __init__(
        self,
        channels: int,
        target_channels: int,
        cost_channels: Optional[int] = None,
        k_target: int = 16,
        k_source: int = 16,
        weightnet_hidden: int = 8,
        negative_slope: float = 0.1,
    ):
        super().__init__()
        cost_channels = cost_channels or channels
        self.k_target = k_target
        self.k_source = k_source
        self.cost_mlp = Mlp(
            channels + target_channels + 3,
            [cost_channels, cost_channels],
            negative_slope=negative_slope,
        )
        self.point_weights = WeightNet(cost_channels, weightnet_hidden, negative_slope)
        self.patch_weights = WeightNet(cost_channels, weightnet_hidden, negative_slope)
        self.out_channels = cost_channels

    def point_cost(
        self, warped: WarpedFrame, target_level: PyramidLevel
    ) -> torch.Tensor:
        neighbors = knn(warped.positions, target_level.positions, self.k_target)
        idx = neighbors.indices
        direction = target_level.positions[idx] - warped.positions[:, None, :]
        own = warped.features[:, None, :].expand(-1, idx.shape[1], -1)
        pairs = torch.cat([own, target_level.features[idx], direction], dim=-1)
        cost = self.cost_mlp(pairs)
        return (self.point_weights(direction) * cost).sum(dim=1)

    def forward(self, warped: WarpedFrame, target_level: PyramidLevel) -> torch.Tensor:
        cv_point = self.point_cost(warped, target_level)
        neighbors = knn(warped.positions, warped.positions, self.k_source)
        idx = neighbors.indices
        direction = warped.positions[idx] - warped.positions[:, None, :]
        return (self.patch_weights(direction) * cv_point[idx]).sum(dim=1)


class FlowPredictor(nn.Module):
    """PointConv over self-neighborhoods, an MLP and a linear layer to 3D.

    The final layer starts at zero, so an untrained predictor outputs zero
    flow and a refinement level starts from the upsampled estimate.
    """

    def __init__(
        self,
        in_channels: int,
        widths,
        k: int = 16,
        weightnet: int = 8,
        weightnet_hidden: int = 8,
        negative_slope: float = 0.1,
    ):
        super().__init__()
        self.k = k
        self.conv = PointConv(
            in_channels,
            widths[0],
            weightnet=weightnet,
            weightnet_hidden=weightnet_hidden,
            negative_slope=negative_slope,
        )
        self.mlp = Mlp(widths[0], widths[1:], negative_slope=negative_slope)
        self.fc = nn.Linear(self.mlp.out_channels, 3)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, positions: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        neighbors = knn(positions, positions, min(self.k, positions.shape[0]))
        hidden = self.conv(positions, features, positions, neighbors)
        return self.fc(self.mlp(hidden))


class RefineLevel(nn.Module):
    """Residual refinement of one pyramid level.

    Args:
        config (ModelConfig): The model configuration.
        level (int): 0-based pyramid level (0 is the finest).
        coarse_width (int): Width of the features coming from the level
            above; 0 when the level starts from zero flow.
    """

    def __init__(self, config: ModelConfig, level: int, coarse_width: int):
        super().__init__()
        channels = config.widths[level]
        slope = config.negative_slope
        self.level = level
        self.coarse_width = coarse_width
        self.upsample_k = config.upsample_k
        self.upsample_eps = config.upsample_eps
        self.str = SpatialTemporalReembedding(
            channels,
            k=config.str_k,
            position_width=config.position_width,
            use_spatial=config.use_str_spatial,
            use_temporal=config.use_str_temporal,
            negative_slope=slope,
        )
        self.cost_volume = CostVolume(
            channels,
            channels,
            k_target=config.cost_k_target,
            k_source=config.cost_k_source,
            weightnet_hidden=config.weightnet_hidden,
            negative_slope=slope,
        )
        self.predictor = FlowPredictor(
            self.cost_volume.out_channels + channels + coarse_width,
            config.predictor_widths,
            k=config.predictor_k,
            weightnet=config.weightnet_width,
            weightnet_hidden=config.weightnet_hidden,
            negative_slope=slope,
        )

    def forward(
        self,
        source_level: PyramidLevel,
        target_level: PyramidLevel,
        coarse_level: Optional[PyramidLevel] = None,
        coarse_flow: Optional[torch.Tensor] = None,
        coarse_features: Optional[torch.Tensor] = None,
    ) -> LevelOutput:
        positions = source_level.positions
        if coarse_flow is None:
            upsampled = positions.new_zeros(positions.shape)
            upsampled_features = None
        else:
            upsampled, upsampled_features = upsample_flow_and_features(
                coarse_level,
                source_level,
                coarse_flow,
                coarse_features if self.coarse_width else None,
                self.upsample_k,
                self.upsample_eps,
            )

        warped = WarpedFrame(warp(positions, upsampled), source_level.features)
        strf, target_features = self.str(warped, target_level)
        warped = WarpedFrame(warped.positions, strf)
        cost = self.cost_volume(warped, target_level)

        inputs = [cost, strf]
        if self.coarse_width:
            if upsampled_features is None:
                raise ValueError(f"level {self.level} expects coarse features")
            inputs.append(upsampled_features)
        residual = self.predictor(warped.positions, torch.cat(inputs, dim=-1))

        return LevelOutput(
            flow=upsampled + residual,
            residual=residual,
            upsampled_flow=upsampled,
            features=strf,
            target_features=target_features,
            warped_positions=warped.positions,
        )
