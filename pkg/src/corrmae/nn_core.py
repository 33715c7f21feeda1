"""Differentiable building blocks: MLPs, linear attention, kNN graphs, edge convolution.

Tensors are batched as ``(B, n, C)``. Parameters live in ordinary
``torch.nn.Module`` objects; ``named_parameters()`` is the parameter store and
autograd provides the gradients that :func:`grad_check` verifies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import KTooLarge, NonFiniteGradient, ShapeMismatch

DEFAULT_K = 9


class MLP(nn.Module):
    """Affine + activation per hidden layer, linear output layer."""

    def __init__(self, widths: Sequence[int], activation: Callable = F.relu):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = tuple(int(w) for w in widths)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(self.widths[:-1], self.widths[1:]))
        self.activation = activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ShapeMismatch(f"MLP expects last dimension {self.widths[0]}, got {x.shape[-1]}")
        for layer in self.layers[:-1]:
            x = self.activation(layer(x))
        return self.layers[-1](x)


def mlp_forward(mlp: MLP, x: torch.Tensor) -> torch.Tensor:
    return mlp(x)


def elu_feature_map(u: torch.Tensor) -> torch.Tensor:
    return F.elu(u) + 1.0


def linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Kernelized attention ``phi(Q) (phi(K)^T V) / (phi(Q) . sum_j phi(K_j))``.

    Shapes ``(..., n, d)``; cost is linear in ``n`` and no ``n x n`` matrix is formed.
    """
    q = elu_feature_map(q)
    k = elu_feature_map(k)
    kv = k.transpose(-2, -1) @ v
    z = q @ k.sum(-2, keepdim=True).transpose(-2, -1)
    return (q @ kv) / (z + eps)


class LinearAttentionBlock(nn.Module):
    """Pre-norm linear self-attention and feed-forward sublayers, each residual."""

    def __init__(self, channels: int = 128, heads: int = 4, ffn_mult: int = 2):
        super().__init__()
        if channels % heads:
            raise ShapeMismatch(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.norm1 = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        self.norm2 = nn.LayerNorm(channels)
        self.ffn = MLP([channels, ffn_mult * channels, channels])

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        """Multi-head attention output on already-normalized tokens."""
        B, n, C = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(B, n, 3, h, C // h).permute(2, 0, 3, 1, 4)
        out = linear_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(B, n, C))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() != 3 or tokens.shape[-1] != self.channels:
            raise ShapeMismatch(f"expected (B, n, {self.channels}) tokens, got {tuple(tokens.shape)}")
        x = tokens + self.attend(self.norm1(tokens))
        return x + self.ffn(self.norm2(x))


def knn_graph(features: torch.Tensor, k: int = DEFAULT_K, chunk: int = 256) -> torch.Tensor:
    """Indices of the ``k`` nearest other tokens, ``(..., n, k)``.

    Euclidean distance, self excluded, ties broken by ascending index. Queries
    are processed ``chunk`` rows at a time so memory stays linear in ``n``.
    """
    squeeze = features.dim() == 2
    if squeeze:
        features = features[None]
    B, n, _ = features.shape
    if not 0 < k < n:
        raise KTooLarge(f"k={k} must satisfy 0 < k < n={n}")
    feats = features.detach()
    out = []
    for start in range(0, n, chunk):
        q = feats[:, start : start + chunk]
        d = torch.cdist(q, feats, compute_mode="donot_use_mm_for_euclid_dist")
        rows = torch.arange(q.shape[1], device=d.device)
        d[:, rows, rows + start] = float("inf")
        vals, idx = torch.topk(d, k, dim=-1, largest=False, sorted=True)
        kth = vals[..., -1:]
        tied = (d <= kth).sum(-1) > k
        if k > 1:
            tied |= (vals[..., 1:] == vals[..., :-1]).any(-1)
        if bool(tied.any()):
            # exact ties: only a stable sort honours the ascending-index rule
            idx = torch.sort(d, dim=-1, stable=True).indices[..., :k]
        out.append(idx)
    idx = torch.cat(out, dim=1)
    return idx[0] if squeeze else idx


def _gather_tokens(t: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``t[b, idx[b, i, j]]`` -> ``(B, n, k, C)``."""
    B = t.shape[0]
    b = torch.arange(B, device=t.device)[:, None, None]
    return t[b, idx]


class EdgeConv(nn.Module):
    """``out_i = max_j MLP([t_i, t_j - t_i])`` over the neighbours ``j`` of ``i``.

    The first affine layer is applied per token and then gathered, which is
    exact and avoids materializing the concatenated edge inputs.
    """

    def __init__(self, channels: int = 128, out_channels: Optional[int] = None):
        super().__init__()
        out_channels = out_channels or channels
        self.channels = channels
        self.mlp = MLP([2 * channels, channels, out_channels])

    def edge_features(self, tokens: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
        if tokens.dim() != 3 or tokens.shape[-1] != self.channels:
            raise ShapeMismatch(f"expected (B, n, {self.channels}) tokens, got {tuple(tokens.shape)}")
        if neighbors.shape[:2] != tokens.shape[:2]:
            raise ShapeMismatch("neighbor indices do not match the token batch")
        C = self.channels
        first = self.mlp.layers[0]
        w_center, w_diff = first.weight[:, :C], first.weight[:, C:]
        own = tokens @ (w_center - w_diff).T + first.bias
        other = tokens @ w_diff.T
        h = own[:, :, None, :] + _gather_tokens(other, neighbors)
        for layer in self.mlp.layers[1:]:
            h = layer(self.mlp.activation(h))
        return h

    def forward(self, tokens: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
        return self.edge_features(tokens, neighbors).max(dim=2).values

    @torch.no_grad()
    def has_max_tie(self, tokens: torch.Tensor, neighbors: torch.Tensor, tol: float = 1e-9) -> bool:
        """True when some output channel takes its max at two neighbours (a kink)."""
        if neighbors.shape[-1] < 2:
            return False
        top2 = self.edge_features(tokens, neighbors).topk(2, dim=2).values
        return bool(((top2[:, :, 0] - top2[:, :, 1]).abs() <= tol).any())


@dataclass
class GradCheckResult:
    max_rel_error: float
    excluded: bool = False
    n_coords: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.excluded or self.max_rel_error < tol


def grad_check(
    fn: Callable[[], torch.Tensor],
    wrt: Sequence[torch.Tensor],
    eps: float = 1e-6,
    max_coords: Optional[int] = 64,
    seed: int = 0,
    nondiff_probe: Optional[Callable[[], bool]] = None,
) -> GradCheckResult:
    """Compare autograd gradients of ``fn`` against central finite differences.

    ``fn`` takes no arguments and reads the float64 tensors in ``wrt``; a
    non-scalar output is contracted with a fixed random tensor. At most
    ``max_coords`` coordinates per tensor are probed. The error is
    ``max|analytic - fd| / max(max|analytic|, max|fd|)`` over all probed
    coordinates. If ``nondiff_probe`` reports a known kink the probe is
    returned as excluded.
    """
    if nondiff_probe is not None and nondiff_probe():
        return GradCheckResult(float("nan"), excluded=True)
    gen = torch.Generator().manual_seed(seed)
    out = fn()
    proj = torch.randn(out.shape, generator=gen, dtype=out.dtype) if out.dim() else None

    def scalar():
        o = fn()
        return (o * proj).sum() if proj is not None else o

    leaves = [w for w in wrt]
    grads = torch.autograd.grad(scalar(), leaves, allow_unused=True)
    analytic, numeric = [], []
    with torch.no_grad():
        for w, g in zip(leaves, grads):
            g = torch.zeros_like(w) if g is None else g
            if not bool(torch.isfinite(g).all()):
                raise NonFiniteGradient("analytic gradient contains non-finite values")
            flat = w.view(-1)
            if max_coords is None or flat.numel() <= max_coords:
                coords = torch.arange(flat.numel())
            else:
                coords = torch.randperm(flat.numel(), generator=gen)[:max_coords]
            for c in coords.tolist():
                old = flat[c].item()
                flat[c] = old + eps
                fp = scalar().item()
                flat[c] = old - eps
                fm = scalar().item()
                flat[c] = old
                numeric.append((fp - fm) / (2 * eps))
                analytic.append(g.reshape(-1)[c].item())
    a = torch.tensor(analytic, dtype=torch.float64)
    f = torch.tensor(numeric, dtype=torch.float64)
    if not bool(torch.isfinite(f).all()):
        raise NonFiniteGradient("finite-difference probe produced non-finite values")
    scale = max(a.abs().max().item() if a.numel() else 0.0, f.abs().max().item() if f.numel() else 0.0, 1e-300)
    err = (a - f).abs().max().item() / scale if a.numel() else 0.0
    return GradCheckResult(err, excluded=False, n_coords=int(a.numel()))
