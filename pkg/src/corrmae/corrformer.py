"""CorrFormer: bi-level correspondence encoder.

Each block computes ``Local(GNN(T)) + Global(T)``: a graph-convolution branch
over a feature-space kNN graph feeding a linear-attention level, summed with
an independent linear-attention level on the same input. There is no
positional encoding because correspondences are unordered.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List

import torch
import torch.nn as nn

from .errors import ConfigError, EmptyInput, ShapeMismatch
from .nn_core import DEFAULT_K, MLP, EdgeConv, LinearAttentionBlock, knn_graph

LEVELS = ("both", "local", "global")


@dataclass(frozen=True)
class EncoderConfig:
    blocks: int = 2
    channels: int = 128
    k: int = DEFAULT_K
    heads: int = 4
    # ablation switch: "local" or "global" zeroes the other level
    levels: str = "both"

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> List[str]:
        p = []
        if self.blocks < 1:
            p.append(f"encoder blocks must be >= 1, got {self.blocks}")
        if self.channels <= 0:
            p.append(f"channels must be > 0, got {self.channels}")
        elif self.heads <= 0 or self.channels % self.heads:
            p.append(f"channels {self.channels} must be divisible by heads {self.heads}")
        if self.k < 1:
            p.append(f"k must be >= 1, got {self.k}")
        if self.levels not in LEVELS:
            p.append(f"levels must be one of {LEVELS}, got {self.levels!r}")
        return p

    def to_dict(self):
        return asdict(self)


class CorrFormerBlock(nn.Module):
    def __init__(self, channels: int = 128, k: int = DEFAULT_K, heads: int = 4, levels: str = "both"):
        super().__init__()
        self.k = k
        self.levels = levels
        self.gnn = EdgeConv(channels)
        self.local = LinearAttentionBlock(channels, heads)
        self.global_ = LinearAttentionBlock(channels, heads)

    def neighbors(self, tokens: torch.Tensor) -> torch.Tensor:
        n = tokens.shape[1]
        if n == 1:
            # a lone token is its own neighbour: edge feature [t, 0]
            return torch.zeros(tokens.shape[0], 1, 1, dtype=torch.long, device=tokens.device)
        return knn_graph(tokens, min(self.k, n - 1))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        out = 0
        if self.levels in ("both", "local"):
            out = out + self.local(self.gnn(tokens, self.neighbors(tokens)))
        if self.levels in ("both", "global"):
            out = out + self.global_(tokens)
        return out


class CorrFormerEncoder(nn.Module):
    """Per-correspondence embedding 4 -> C followed by ``blocks`` CorrFormer blocks."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.embed = MLP([4, cfg.channels, cfg.channels])
        self.blocks = nn.ModuleList(
            CorrFormerBlock(cfg.channels, cfg.k, cfg.heads, cfg.levels) for _ in range(cfg.blocks)
        )

    def embed_correspondences(self, corrs: torch.Tensor) -> torch.Tensor:
        if corrs.shape[-1] != 4:
            raise ShapeMismatch(f"correspondences must be 4-vectors, got shape {tuple(corrs.shape)}")
        if corrs.shape[-2] == 0:
            raise EmptyInput("cannot embed an empty correspondence set")
        return self.embed(corrs)

    def forward(self, corrs: torch.Tensor) -> torch.Tensor:
        squeeze = corrs.dim() == 2
        if squeeze:
            corrs = corrs[None]
        t = self.embed_correspondences(corrs)
        for block in self.blocks:
            t = block(t)
        return t[0] if squeeze else t


def encode(encoder: CorrFormerEncoder, corrs: torch.Tensor) -> torch.Tensor:
    return encoder(corrs)
