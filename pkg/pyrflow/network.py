"""The complete coarse-to-fine scene flow network."""

from dataclasses import dataclass
from typing import List, Optional
import torch
import torch.nn as nn
from .backbone import Backbone, Pyramid
from .fusion import GlobalEmbedding, GlobalFusion
from .geometry import check_points
from .io import ModelConfig
from .refine import FlowPredictor, LevelOutput, RefineLevel


@dataclass
class FlowOutput:
    """Network output for one frame pair.

    ``levels`` holds one :class:`LevelOutput` per pyramid level, finest first.
    """

    levels: List[LevelOutput]
    source: Pyramid
    target: Pyramid
    global_embedding: Optional[GlobalEmbedding] = None

    @property
    def flows(self) -> List[torch.Tensor]:
        return [level.flow for level in self.levels]

    @property
    def flow(self) -> torch.Tensor:
        """Full-resolution flow of the finest level."""
        return self.levels[0].flow


class FlowNet(nn.Module):
    """Backbone, global fusion initialization and residual refinement.

    The coarsest level is initialized from the global fusion flow embedding
    (or, with global fusion disabled, by a refinement level starting from
    zero flow). Every finer level refines the upsampled estimate of the level
    above it.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        top = config.levels - 1
        slope = config.negative_slope
        self.backbone = Backbone(config)

        if config.use_gf:
            self.global_fusion = GlobalFusion(config)
            self.top_predictor = FlowPredictor(
                config.embedding_width,
                config.predictor_widths,
                k=config.predictor_k,
                weightnet=config.weightnet_width,
                weightnet_hidden=config.weightnet_hidden,
                negative_slope=slope,
            )
            top_width = config.embedding_width
        else:
            self.top_refiner = RefineLevel(config, top, coarse_width=0)
            top_width = config.widths[top]

        refiners = []
        for level in range(top):
            coarse_width = top_width if level + 1 == top else config.widths[level + 1]
            refiners.append(RefineLevel(config, level, coarse_width))
        self.refiners = nn.ModuleList(refiners)

    def forward(self, source: torch.Tensor, target: torch.Tensor) -> FlowOutput:
        """Estimate the flow from ``source`` [N, 3] toward ``target`` [M, 3].

        Both frames must hold at least ``level_sizes[0]`` points; only the
        first level size is used for the finest level, so callers resample
        frames to exactly that size.
        """
        check_points(source, "source")
        check_points(target, "target")
        source_pyramid = self.backbone(source)
        target_pyramid = self.backbone(target)
        top = len(source_pyramid) - 1
        src_top, tgt_top = source_pyramid[top], target_pyramid[top]

        embedding = None
        if self.config.use_gf:
            embedding = self.global_fusion(
                src_top.positions, src_top.features, tgt_top.positions, tgt_top.features
            )
            top_flow = self.top_predictor(src_top.positions, embedding.gffe)
            top_output = LevelOutput(
                flow=top_flow,
                residual=top_flow,
                upsampled_flow=torch.zeros_like(top_flow),
                features=embedding.gffe,
                target_features=None,
                warped_positions=src_top.positions,
            )
        else:
            top_output = self.top_refiner(src_top, tgt_top)

        outputs = [top_output]
        for level in range(top - 1, -1, -1):
            coarse = outputs[-1]
            outputs.append(
                self.refiners[level](
                    source_pyramid[level],
                    target_pyramid[level],
                    source_pyramid[level + 1],
                    coarse.flow,
                    coarse.features,
                )
            )

        return FlowOutput(
            levels=outputs[::-1],
            source=source_pyramid,
            target=target_pyramid,
            global_embedding=embedding,
        )
