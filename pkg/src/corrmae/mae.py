"""Masked-correspondence pre-training.

A share of the true correspondences is hidden; the encoder sees the rest.
Two branches reconstruct the hidden source and target keypoints. Each mask
token embeds a random keypoint together with the ground-truth point of the
*other* view (its positional prompt). The mask-token MLP and the decoder are
shared between the branches; each branch has its own prediction head.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import ENCODER_NAMESPACE, module_arrays, save_checkpoint
from .corrformer import CorrFormerEncoder, EncoderConfig
from .errors import ConfigError, DegenerateMask, NonFiniteLoss, ShapeMismatch
from .nn_core import MLP, LinearAttentionBlock

MASK_KINDS = ("random", "block")
BLOCK_GRAPH_K = 8


@dataclass(frozen=True)
class MaskPlan:
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    ratio: float
    kind: str

    @property
    def size(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)


@dataclass
class ReconstructionOutput:
    p_hat_s: torch.Tensor  # (..., m, 2)
    p_hat_t: torch.Tensor  # (..., m, 2)

    @property
    def combined(self) -> torch.Tensor:
        return torch.cat([self.p_hat_s, self.p_hat_t], dim=-1)


def n_masked(M: int, ratio: float) -> int:
    """``round(ratio * M)`` with halves rounded up."""
    return int(math.floor(ratio * M + 0.5))


def _check_mask(M: int, ratio: float) -> int:
    m = n_masked(M, ratio)
    if M < 2 or m < 1 or m >= M:
        raise DegenerateMask(f"ratio {ratio} on {M} correspondences masks {m}; need 1 <= masked < M")
    return m


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def mask_random(M: int, ratio: float, seed=None) -> MaskPlan:
    m = _check_mask(M, ratio)
    perm = _rng(seed).permutation(M)
    return MaskPlan(np.sort(perm[m:]), np.sort(perm[:m]), ratio, "random")


def block_graph(corrs: np.ndarray, k: int = BLOCK_GRAPH_K) -> List[np.ndarray]:
    """Symmetrized kNN adjacency in 4-D correspondence space."""
    corrs = np.asarray(corrs, dtype=np.float64)
    M = len(corrs)
    k = min(k, M - 1)
    d = np.linalg.norm(corrs[:, None, :] - corrs[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    nn_idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    adj = [set() for _ in range(M)]
    for i in range(M):
        for j in nn_idx[i]:
            adj[i].add(int(j))
            adj[int(j)].add(i)
    return [np.array(sorted(a), dtype=np.int64) for a in adj]


def mask_block(M: int, ratio: float, corrs, seed=None, graph_k: int = BLOCK_GRAPH_K) -> MaskPlan:
    """Grow a block from a random seed correspondence.

    Points are added in order of 4-D distance to the seed among the unmasked
    kNN-graph neighbours of the current block; if the block's connected
    component runs out, growth restarts from a new random seed.
    """
    corrs = np.asarray(corrs, dtype=np.float64)
    if len(corrs) != M:
        raise ShapeMismatch(f"got {len(corrs)} correspondences for M={M}")
    m = _check_mask(M, ratio)
    rng = _rng(seed)
    adj = block_graph(corrs, graph_k)
    masked = np.zeros(M, dtype=bool)
    count = 0
    while count < m:
        seed_idx = int(rng.choice(np.flatnonzero(~masked)))
        origin = corrs[seed_idx]
        heap = [(0.0, seed_idx)]
        queued = {seed_idx}
        while heap and count < m:
            _, i = heapq.heappop(heap)
            masked[i] = True
            count += 1
            for j in adj[i]:
                if not masked[j] and j not in queued:
                    queued.add(int(j))
                    heapq.heappush(heap, (float(np.linalg.norm(corrs[j] - origin)), int(j)))
    return MaskPlan(np.flatnonzero(~masked), np.flatnonzero(masked), ratio, "block")


def make_mask(kind: str, M: int, ratio: float, corrs, rng) -> MaskPlan:
    if kind == "random":
        return mask_random(M, ratio, rng)
    if kind == "block":
        return mask_block(M, ratio, corrs, rng)
    raise ValueError(f"unknown mask kind {kind!r}")


class CorrMAE(nn.Module):
    def __init__(self, encoder_cfg: EncoderConfig = EncoderConfig(), decoder_depth: int = 1):
        super().__init__()
        if decoder_depth >= encoder_cfg.blocks:
            raise ConfigError(f"decoder depth {decoder_depth} must be smaller than encoder depth {encoder_cfg.blocks}")
        C = encoder_cfg.channels
        self.encoder = CorrFormerEncoder(encoder_cfg)
        self.mask_embed = MLP([4, C, C])
        self.decoder = nn.ModuleList(LinearAttentionBlock(C, encoder_cfg.heads) for _ in range(decoder_depth))
        self.decoder_norm = nn.LayerNorm(C)
        self.head_s = MLP([C, C, 2])
        self.head_t = MLP([C, C, 2])

    def build_mask_tokens(self, p_mask: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        if p_mask.shape != prompt.shape or p_mask.shape[-1] != 2:
            raise ShapeMismatch(f"mask keypoints {tuple(p_mask.shape)} and prompts {tuple(prompt.shape)} must both be (..., m, 2)")
        return self.mask_embed(torch.cat([p_mask, prompt], dim=-1))

    def decode_branch(self, t_mask: torch.Tensor, t_vis: torch.Tensor, head: nn.Module) -> torch.Tensor:
        if t_mask.shape[-1] != t_vis.shape[-1] or t_mask.shape[0] != t_vis.shape[0]:
            raise ShapeMismatch(f"mask tokens {tuple(t_mask.shape)} and visible tokens {tuple(t_vis.shape)} disagree")
        m = t_mask.shape[1]
        x = torch.cat([t_mask, t_vis], dim=1)
        for block in self.decoder:
            x = block(x)
        return head(self.decoder_norm(x[:, :m]))

    def forward(self, visible: torch.Tensor, masked_gt: torch.Tensor, p_mask_s: torch.Tensor, p_mask_t: torch.Tensor):
        """Reconstruct the masked correspondences.

        ``visible`` is ``(B, Mv, 4)``, ``masked_gt`` is ``(B, m, 4)`` and the
        random mask keypoints are ``(B, m, 2)``. Returns the reconstruction
        and the visible tokens.
        """
        t_vis = self.encoder(visible)
        gt_s, gt_t = masked_gt[..., :2], masked_gt[..., 2:]
        tok_s = self.build_mask_tokens(p_mask_s, gt_t)
        tok_t = self.build_mask_tokens(p_mask_t, gt_s)
        out = ReconstructionOutput(self.decode_branch(tok_s, t_vis, self.head_s), self.decode_branch(tok_t, t_vis, self.head_t))
        return out, t_vis


def reconstruction_terms(out: ReconstructionOutput, gt_s: torch.Tensor, gt_t: torch.Tensor):
    """(source MSE, target MSE); each a mean over rows and both coordinates."""
    if out.p_hat_s.shape != gt_s.shape or out.p_hat_t.shape != gt_t.shape:
        raise ShapeMismatch("reconstruction and ground truth rows are not aligned")
    return (out.p_hat_s - gt_s).square().mean(), (out.p_hat_t - gt_t).square().mean()


def loss_reconstruction(out: ReconstructionOutput, gt_s: torch.Tensor, gt_t: torch.Tensor) -> torch.Tensor:
    ls, lt = reconstruction_terms(out, gt_s, gt_t)
    return ls + lt


def distance_graph(points: torch.Tensor) -> torch.Tensor:
    """Complete graph of pairwise Euclidean distances, ``(..., m, m)``.

    The square root has a zero subgradient at coincident points.
    """
    diff = points[..., :, None, :] - points[..., None, :, :]
    sq = diff.square().sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def loss_alignment(out: ReconstructionOutput) -> torch.Tensor:
    """Mean absolute difference between the two branches' distance graphs."""
    if out.p_hat_s.shape[-2] < 2:
        raise DegenerateMask("alignment needs at least two masked correspondences")
    return (distance_graph(out.p_hat_s) - distance_graph(out.p_hat_t)).abs().mean()


def pretrain_loss(rec_s: torch.Tensor, rec_t: torch.Tensor, align: torch.Tensor, lam: float) -> torch.Tensor:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return rec_s + rec_t + lam * align


@dataclass(frozen=True)
class PretrainConfig:
    ratio: float = 0.6
    lam: float = 0.1
    epochs: int = 100
    batch: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05
    schedule: str = "cosine"
    decoder_depth: int = 1
    mask_kind: str = "random"
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    checkpoint_every: int = 0  # epochs; 0 = only the final checkpoint

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> List[str]:
        p = []
        if not 0.0 < self.ratio < 1.0:
            p.append(f"ratio must lie in (0, 1), got {self.ratio}")
        if self.lam < 0:
            p.append(f"lam must be >= 0, got {self.lam}")
        if self.epochs < 1:
            p.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            p.append(f"batch must be >= 1, got {self.batch}")
        if not self.lr > 0:
            p.append(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            p.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.schedule not in ("cosine", "constant"):
            p.append(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if self.mask_kind not in MASK_KINDS:
            p.append(f"mask_kind must be one of {MASK_KINDS}, got {self.mask_kind!r}")
        if not isinstance(self.encoder, EncoderConfig):
            p.append("encoder must be an EncoderConfig")
        elif not 1 <= self.decoder_depth < self.encoder.blocks:
            p.append(f"decoder_depth must satisfy 1 <= depth < encoder blocks ({self.encoder.blocks}), got {self.decoder_depth}")
        if self.checkpoint_every < 0:
            p.append("checkpoint_every must be >= 0")
        return p

    def to_dict(self):
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d


def crop_batch(corpus: Sequence[np.ndarray], idx: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Stack scenes into ``(B, M, 4)``, randomly subsampling each to the smallest M."""
    m = min(len(corpus[i]) for i in idx)
    rows = []
    for i in idx:
        c = corpus[i]
        keep = np.sort(rng.choice(len(c), size=m, replace=False)) if len(c) > m else np.arange(m)
        rows.append(c[keep])
    return np.stack(rows)


def split_batch(batch: np.ndarray, cfg: PretrainConfig, rng: np.random.Generator):
    """Mask every scene in a ``(B, M, 4)`` batch; returns (visible, masked) arrays."""
    B, M, _ = batch.shape
    vis, msk = [], []
    for b in range(B):
        plan = make_mask(cfg.mask_kind, M, cfg.ratio, batch[b], rng)
        vis.append(batch[b, plan.visible_idx])
        msk.append(batch[b, plan.masked_idx])
    return np.stack(vis), np.stack(msk)


def random_mask_keypoints(shape, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """Uniform on [-1, 1]^2, the normalized view window."""
    return torch.rand(shape, generator=generator, dtype=dtype) * 2.0 - 1.0


def step_losses(model: CorrMAE, visible, masked, generator: torch.Generator, lam: float):
    dtype = next(model.parameters()).dtype
    visible = torch.as_tensor(visible, dtype=dtype)
    masked = torch.as_tensor(masked, dtype=dtype)
    shape = (*masked.shape[:-1], 2)
    p_s = random_mask_keypoints(shape, generator, dtype)
    p_t = random_mask_keypoints(shape, generator, dtype)
    out, _ = model(visible, masked, p_s, p_t)
    rec_s, rec_t = reconstruction_terms(out, masked[..., :2], masked[..., 2:])
    align = loss_alignment(out)
    return rec_s, rec_t, align, pretrain_loss(rec_s, rec_t, align, lam), out


def pretrain(
    model: CorrMAE,
    corpus: Sequence[np.ndarray],
    cfg: PretrainConfig,
    trace_path=None,
    checkpoint_path=None,
    on_step: Optional[Callable[[dict], None]] = None,
):
    """Train ``model`` on a corpus of ``(M_i, 4)`` inlier arrays. Returns the loss trace.

    AdamW with cosine decay over all steps. Batching, masking and mask
    keypoints are all driven by ``cfg.seed``.
    """
    if not corpus:
        raise ValueError("empty pre-training corpus")
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    steps_per_epoch = math.ceil(len(corpus) / cfg.batch)
    total = steps_per_epoch * cfg.epochs
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total)
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)
    trace = []
    sink = open(trace_path, "w") if trace_path else None
    step = 0
    model.train()
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(corpus))
            for s in range(steps_per_epoch):
                idx = order[s * cfg.batch : (s + 1) * cfg.batch]
                batch = crop_batch(corpus, idx, rng)
                visible, masked = split_batch(batch, cfg, rng)
                rec_s, rec_t, align, loss, _ = step_losses(model, visible, masked, gen, cfg.lam)
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(f"non-finite pre-training loss at step {step}", batch_id=step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                rec = {
                    "step": step,
                    "epoch": epoch,
                    "L_rec_s": rec_s.item(),
                    "L_rec_t": rec_t.item(),
                    "L_align": align.item(),
                    "total": loss.item(),
                }
                trace.append(rec)
                if sink:
                    sink.write(json.dumps(rec) + "\n")
                if on_step:
                    on_step(rec)
                step += 1
            if checkpoint_path and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_pretrain_checkpoint(model, f"{checkpoint_path}.epoch{epoch + 1}", cfg)
    finally:
        if sink:
            sink.close()
    if checkpoint_path:
        save_pretrain_checkpoint(model, checkpoint_path, cfg)
    return trace


def save_pretrain_checkpoint(model: CorrMAE, path, cfg: PretrainConfig) -> None:
    arrays = module_arrays(model.encoder, ENCODER_NAMESPACE)
    for name in ("mask_embed", "decoder", "decoder_norm", "head_s", "head_t"):
        arrays.update(module_arrays(getattr(model, name), f"mae.{name}."))
    save_checkpoint(path, arrays, {"stage": "pretrain", "config": cfg.to_dict()})


def epoch_means(trace: Sequence[dict], key: str = "rec") -> List[float]:
    """Mean per epoch of ``L_rec_s + L_rec_t`` (``key="rec"``) or of a trace field."""
    by_epoch = {}
    for r in trace:
        v = r["L_rec_s"] + r["L_rec_t"] if key == "rec" else r[key]
        by_epoch.setdefault(r["epoch"], []).append(v)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


@torch.no_grad()
def reconstruction_error(model: CorrMAE, corpus: Sequence[np.ndarray], ratio: float = 0.6, seed: int = 0, batch: int = 64) -> float:
    """Mean reconstruction MSE (both branches) over held-out scenes."""
    model.eval()
    cfg = PretrainConfig(ratio=ratio, seed=seed, encoder=model.encoder.cfg, decoder_depth=len(model.decoder))
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    errs, weights = [], []
    for s in range(0, len(corpus), batch):
        idx = list(range(s, min(s + batch, len(corpus))))
        b = crop_batch(corpus, idx, rng)
        visible, masked = split_batch(b, cfg, rng)
        rec_s, rec_t, _, _, _ = step_losses(model, visible, masked, gen, 0.0)
        errs.append((rec_s + rec_t).item())
        weights.append(len(idx))
    model.train()
    return float(np.average(errs, weights=weights))


@torch.no_grad()
def dump_reconstructions(model: CorrMAE, corpus: Sequence[np.ndarray], path, ratio: float = 0.6, seed: int = 0, limit: int = 8) -> None:
    """Write masked ground truth and both branches' predictions for a few scenes as JSON."""
    model.eval()
    cfg = PretrainConfig(ratio=ratio, seed=seed, encoder=model.encoder.cfg, decoder_depth=len(model.decoder))
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    scenes = []
    for i in range(min(limit, len(corpus))):
        visible, masked = split_batch(np.asarray(corpus[i])[None], cfg, rng)
        *_, out = step_losses(model, visible, masked, gen, 0.0)
        scenes.append(
            {
                "visible": visible[0].tolist(),
                "masked": masked[0].tolist(),
                "p_hat_s": out.p_hat_s[0].tolist(),
                "p_hat_t": out.p_hat_t[0].tolist(),
            }
        )
    model.train()
    with open(path, "w") as f:
        json.dump({"ratio": ratio, "seed": seed, "scenes": scenes}, f)
