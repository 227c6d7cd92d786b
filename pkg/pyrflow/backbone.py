"""Hierarchical PointConv feature pyramid."""

from dataclasses import dataclass
from typing import List, Optional, Sequence
import torch
import torch.nn as nn
from .geometry import NeighborSet, check_points, fps, group_relative, knn
from .io import ModelConfig

LEAKY_RATE = 0.1


class Mlp(nn.Module):
    """Stack of linear layers with leaky-rectifier activations.

    Args:
        in_channels (int): Input width.
        widths (Sequence[int]): Output width of each layer.
        last_activation (bool): Apply the activation after the last layer.
        bias (bool): Use biases in every layer.
        negative_slope (float): Slope of the leaky rectifier.
    """

    def __init__(
        self,
        in_channels: int,
        widths: Sequence[int],
        last_activation: bool = True,
        bias: bool = True,
        negative_slope: float = LEAKY_RATE,
    ):
        super().__init__()
        layers = []
        last = in_channels
        for i, width in enumerate(widths):
            layers.append(nn.Linear(last, width, bias=bias))
            if last_activation or i < len(widths) - 1:
                layers.append(nn.LeakyReLU(negative_slope))
            last = width
        self.layers = nn.Sequential(*layers)
        self.out_channels = last

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class WeightNet(nn.Module):
    """Shared MLP mapping relative coordinates to convolution weights."""

    def __init__(
        self,
        out_channels: int,
        hidden: int = 8,
        negative_slope: float = LEAKY_RATE,
    ):
        super().__init__()
        self.mlp = Mlp(3, [hidden, hidden, out_channels], negative_slope=negative_slope)
        self.out_channels = out_channels

    def forward(self, relative: torch.Tensor) -> torch.Tensor:
        return self.mlp(relative)


class PointConv(nn.Module):
    """Continuous convolution over fixed-size neighbor groups.

    For each center the weight net output ``W(p_j - c)`` [K, W] is combined
    with the neighbor features ``f_j`` [K, C] as ``sum_j f_j^T W_j`` [C, W],
    flattened, projected to ``out_channels`` and activated.

    Args:
        in_channels (int): Width of the neighbor features.
        out_channels (int): Output width.
        weightnet (int): Output width of the weight net.
        weightnet_hidden (int): Hidden width of the weight net.
        bias (bool): Use a bias in the projection.
        negative_slope (float): Slope of the leaky rectifier.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        weightnet: int = 8,
        weightnet_hidden: int = 8,
        bias: bool = True,
        negative_slope: float = LEAKY_RATE,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weightnet = WeightNet(weightnet, weightnet_hidden, negative_slope)
        self.linear = nn.Linear(weightnet * in_channels, out_channels, bias=bias)
        self.relu = nn.LeakyReLU(negative_slope)

    def forward(
        self,
        positions: torch.Tensor,
        features: torch.Tensor,
        centers: torch.Tensor,
        neighbors: NeighborSet,
    ) -> torch.Tensor:
        """Aggregate the features of ``positions`` at ``centers``.

        Args:
            positions (torch.Tensor): Input points [N, 3].
            features (torch.Tensor): Input features [N, C].
            centers (torch.Tensor): Output points [S, 3].
            neighbors (NeighborSet): Groups of each center among ``positions``.

        Raises:
            ValueError: If a group has padding slots (radius-truncated groups).

        Returns:
            torch.Tensor: Output features [S, out_channels].
        """
        if features.shape[1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} feature channels, got {features.shape[1]}"
            )
        if not bool(neighbors.valid.all()):
            raise ValueError("PointConv needs non-empty fixed-size neighbor groups")

        relative, grouped = group_relative(positions, features, neighbors, centers)
        weights = self.weightnet(relative)
        aggregated = torch.einsum("skc,skw->scw", grouped, weights)
        return self.relu(self.linear(aggregated.reshape(centers.shape[0], -1)))


@dataclass
class PyramidLevel:
    """One level of a frame pyramid."""

    positions: torch.Tensor
    features: torch.Tensor
    sample_indices: Optional[torch.Tensor] = None

    @property
    def size(self) -> int:
        return self.positions.shape[0]


@dataclass
class Pyramid:
    """Downsampled positions and features of one frame, finest level first."""

    levels: List[PyramidLevel]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> PyramidLevel:
        return self.levels[level]

    def composed_indices(self, level: int) -> torch.Tensor:
        """Indices of the points of ``level`` (0-based) into the finest level."""
        finest = self.levels[0]
        indices = torch.arange(finest.size, device=finest.positions.device)
        for current in self.levels[1 : level + 1]:
            indices = indices[current.sample_indices]
        return indices


class Backbone(nn.Module):
    """Siamese feature pyramid shared by the source and target frames.

    Level 1 features come from a PointConv over the raw coordinates on the
    full-resolution frame; every coarser level is selected by farthest point
    sampling and aggregated with a PointConv over its K nearest neighbors in
    the finer level.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        conv = dict(
            weightnet=config.weightnet_width,
            weightnet_hidden=config.weightnet_hidden,
            negative_slope=config.negative_slope,
        )
        self.embed = PointConv(3, config.widths[0], **conv)
        self.down = nn.ModuleList(
            PointConv(config.widths[i], config.widths[i + 1], **conv)
            for i in range(config.levels - 1)
        )

    def forward(
        self, positions: torch.Tensor, features: Optional[torch.Tensor] = None
    ) -> Pyramid:
        """Build the pyramid of one frame.

        Args:
            positions (torch.Tensor): Frame points [N, 3], N >= N_1.
            features (torch.Tensor, optional): Input features [N, 3];
                the coordinates themselves when omitted.

        Returns:
            Pyramid: The frame pyramid.
        """
        check_points(positions, "frame")
        sizes = self.config.level_sizes
        if positions.shape[0] < sizes[0]:
            raise ValueError(
                f"frame has {positions.shape[0]} points, the pyramid needs at least {sizes[0]}"
            )
        if features is None:
            features = positions

        k = min(self.config.backbone_k, positions.shape[0])
        neighbors = knn(positions, positions, k)
        level_features = self.embed(positions, features, positions, neighbors)
        levels = [PyramidLevel(positions, level_features)]

        for conv, size in zip(self.down, sizes[1:]):
            previous = levels[-1]
            sample = fps(previous.positions, size, seed_index=0)
            centers = previous.positions[sample]
            k = min(self.config.backbone_k, previous.size)
            neighbors = knn(centers, previous.positions, k)
            level_features = conv(
                previous.positions, previous.features, centers, neighbors
            )
            levels.append(PyramidLevel(centers, level_features, sample))

        return Pyramid(levels)
