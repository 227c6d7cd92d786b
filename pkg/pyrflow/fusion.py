"""Global fusion flow embedding at the coarsest pyramid level.

The source and target features are first mixed with the semantic context of
the other frame by dual cross-attention. Every source/target pair is then
embedded from the fused features and an explicit position encoding, and the
pair embeddings of each source point are aggregated with weights derived from
the two attention maps.
"""

import math
from dataclasses import dataclass
from typing import Tuple
import torch
import torch.nn as nn
from .backbone import Mlp
from .io import ModelConfig


@dataclass
class DcaOutput:
    """Result of the dual cross-attention.

    ``fusion_s_to_t`` lives on the target points and ``fusion_t_to_s`` on the
    source points. ``attn_s_to_t`` is [M, N] (rows over target points, softmax
    over source points) and ``attn_t_to_s`` is [N, M].
    """

    fusion_s_to_t: torch.Tensor
    fusion_t_to_s: torch.Tensor
    attn_s_to_t: torch.Tensor
    attn_t_to_s: torch.Tensor


@dataclass
class GlobalEmbedding:
    """Pair embeddings [N, M, d_g], aggregation map [N, M] and result [N, d_g]."""

    gfe: torch.Tensor
    weights: torch.Tensor
    gffe: torch.Tensor


def position_encoding(
    source_pos: torch.Tensor, target_pos: torch.Tensor
) -> torch.Tensor:
    """Nine-value pair encoding ``(x_i, y_j, y_j - x_i)``.

    Args:
        source_pos (torch.Tensor): Points x [N, 3].
        target_pos (torch.Tensor): Points y [M, 3], or [N, K, 3] for grouped
            targets (one group per source point).

    Returns:
        torch.Tensor: Encoding [N, M, 9] (or [N, K, 9]).
    """
    if target_pos.dim() == 2:
        target = target_pos[None, :, :].expand(source_pos.shape[0], -1, -1)
    else:
        target = target_pos
    source = source_pos[:, None, :].expand_as(target)
    return torch.cat([source, target, target - source], dim=-1)


def aggregation_weights(
    attn_s_to_t: torch.Tensor, attn_t_to_s: torch.Tensor
) -> torch.Tensor:
    """Aggregation map ``W = softmax_j(A_s->t^T + A_t->s)``.

    Args:
        attn_s_to_t (torch.Tensor): Attention map [M, N].
        attn_t_to_s (torch.Tensor): Attention map [N, M].

    Raises:
        ValueError: If the shapes do not transpose into each other.

    Returns:
        torch.Tensor: Weights [N, M]; every row sums to one.
    """
    if attn_s_to_t.dim() != 2 or attn_s_to_t.t().shape != attn_t_to_s.shape:
        raise ValueError(
            f"attention maps {tuple(attn_s_to_t.shape)} and {tuple(attn_t_to_s.shape)} "
            "must be [M, N] and [N, M]"
        )
    return torch.softmax(attn_s_to_t.t() + attn_t_to_s, dim=1)


def aggregate_gffe(gfe: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted sum of the pair embeddings over the target axis.

    Args:
        gfe (torch.Tensor): Pair embeddings [N, M, d_g].
        weights (torch.Tensor): Aggregation map [N, M].

    Raises:
        ValueError: If the shapes disagree.

    Returns:
        torch.Tensor: Aggregated embedding [N, d_g].
    """
    if gfe.dim() != 3 or gfe.shape[:2] != weights.shape:
        raise ValueError(
            f"gfe {tuple(gfe.shape)} and weights {tuple(weights.shape)} are inconsistent"
        )
    return torch.einsum("nm,nmd->nd", weights, gfe)


class DualCrossAttention(nn.Module):
    """Multi-head cross-attention applied in both directions.

    Each head projects to ``attention_width`` channels and the logits are
    scaled by ``1 / sqrt(attention_width)``. The per-head fused features are
    concatenated and merged back to ``attention_width``; the per-head maps are
    averaged into a single map per direction. The projections are shared by
    the two directions.
    """

    def __init__(self, in_channels: int, attention_width: int, heads: int):
        super().__init__()
        self.in_channels = in_channels
        self.attention_width = attention_width
        self.heads = heads
        self.query = nn.Linear(in_channels, heads * attention_width)
        self.key = nn.Linear(in_channels, heads * attention_width)
        self.value = nn.Linear(in_channels, heads * attention_width)
        self.merge = nn.Linear(heads * attention_width, attention_width)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        return x.reshape(x.shape[0], self.heads, self.attention_width).transpose(0, 1)

    def attend(
        self, queries: torch.Tensor, keys: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Fuse the context of ``keys`` into the points of ``queries``.

        Returns:
            Tuple[torch.Tensor, torch.Tensor]: Fused features [Q, d_a] and the
            head-averaged attention map [Q, K].
        """
        q = self._split(self.query(queries))
        k = self._split(self.key(keys))
        v = self._split(self.value(keys))
        logits = torch.matmul(q, k.transpose(1, 2)) / math.sqrt(self.attention_width)
        attn = torch.softmax(logits, dim=-1)
        fused = torch.matmul(attn, v).transpose(0, 1).reshape(queries.shape[0], -1)
        return self.merge(fused), attn.mean(dim=0)

    def forward(self, source: torch.Tensor, target: torch.Tensor) -> DcaOutput:
        for name, tensor in (("source", source), ("target", target)):
            if tensor.dim() != 2 or tensor.shape[1] != self.in_channels:
                raise ValueError(
                    f"{name} features must be [n, {self.in_channels}], got {tuple(tensor.shape)}"
                )
        fusion_s_to_t, attn_s_to_t = self.attend(target, source)
        fusion_t_to_s, attn_t_to_s = self.attend(source, target)
        return DcaOutput(fusion_s_to_t, fusion_t_to_s, attn_s_to_t, attn_t_to_s)


class GlobalFusion(nn.Module):
    """All-to-all flow embedding of the coarsest source and target levels.

    Args:
        config (ModelConfig): The model configuration; uses ``widths[-1]``,
            ``attention_width``, ``heads``, ``position_width``,
            ``embedding_width`` and ``w_aggregation``.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.aggregation = config.w_aggregation
        slope = config.negative_slope
        self.dca = DualCrossAttention(
            config.widths[-1], config.attention_width, config.heads
        )
        self.position_mlp = Mlp(9, [config.position_width] * 2, negative_slope=slope)
        self.embedding_mlp = Mlp(
            2 * config.attention_width + 9 + config.position_width,
            [config.embedding_width] * 2,
            negative_slope=slope,
        )
        self.out_channels = config.embedding_width

    def dca_fusion(
        self, source_top: torch.Tensor, target_top: torch.Tensor
    ) -> DcaOutput:
        return self.dca(source_top, target_top)

    def position_encode(
        self, source_pos: torch.Tensor, target_pos: torch.Tensor
    ) -> torch.Tensor:
        """Extended encoding ``(PE_ij, MLP(PE_ij))`` [N, M, 9 + d_p]."""
        encoding = position_encoding(source_pos, target_pos)
        return torch.cat([encoding, self.position_mlp(encoding)], dim=-1)

    def global_flow_embedding(
        self, dca: DcaOutput, pe_star: torch.Tensor
    ) -> torch.Tensor:
        """Pair embeddings ``MLP(fusion_t->s[i], fusion_s->t[j], PE*_ij)``."""
        n, m = dca.fusion_t_to_s.shape[0], dca.fusion_s_to_t.shape[0]
        if pe_star.shape[:2] != (n, m):
            raise ValueError(
                f"position encoding {tuple(pe_star.shape)} does not match {n} x {m} pairs"
            )
        source = dca.fusion_t_to_s[:, None, :].expand(n, m, -1)
        target = dca.fusion_s_to_t[None, :, :].expand(n, m, -1)
        return self.embedding_mlp(torch.cat([source, target, pe_star], dim=-1))

    def forward(
        self,
        source_pos: torch.Tensor,
        source_features: torch.Tensor,
        target_pos: torch.Tensor,
        target_features: torch.Tensor,
    ) -> GlobalEmbedding:
        dca = self.dca_fusion(source_features, target_features)
        pe_star = self.position_encode(source_pos, target_pos)
        gfe = self.global_flow_embedding(dca, pe_star)
        weights = aggregation_weights(dca.attn_s_to_t, dca.attn_t_to_s)
        if self.aggregation == "maxpool":
            gffe = gfe.max(dim=1).values
        else:
            gffe = aggregate_gffe(gfe, weights)
        return GlobalEmbedding(gfe=gfe, weights=weights, gffe=gffe)
