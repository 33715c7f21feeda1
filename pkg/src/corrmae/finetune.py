"""Correspondence pruning: prune-and-re-encode iterations, inlier weights, essential regression.

The network keeps ``K`` pruning stages, each with its own CorrFormer encoder
and inlier predictor. Stage ``k`` re-embeds the surviving raw correspondences,
predicts a logit per correspondence and keeps the top ``floor(n * ratio)``.
A final stage encodes the ``N'`` candidates and predicts the weights that
drive the weighted eight-point estimate.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import ENCODER_NAMESPACE, load_checkpoint, load_into, module_arrays, save_checkpoint
from .corrformer import CorrFormerEncoder, EncoderConfig
from .errors import ConfigError, EmptyIteration, NoInliers, NonFiniteLoss, ShapeMismatch, TooFewCorrespondences
from .geometry import symmetric_epipolar_distance, weighted_eight_point, weights_from_logits
from .nn_core import MLP
from .synthdata import EVAL_THRESHOLD, PRETRAIN_THRESHOLD

REFERENCE_TOTAL_STEPS = 500_000
REFERENCE_WARMUP_STEPS = 20_000
TEMP_RANGE = (0.1, 10.0)
GEO_CLAMP = 0.25


@dataclass(frozen=True)
class FinetuneConfig:
    n_initial: int = 2000
    n_final: int = 500
    iterations: int = 2
    prune_ratio: float = 0.5
    beta: float = 0.5
    warmup_steps: Optional[int] = None  # None: 4% of the total steps
    label_threshold: float = PRETRAIN_THRESHOLD
    eval_threshold: float = EVAL_THRESHOLD
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 1
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def survivor_counts(self) -> List[int]:
        counts = [int(self.n_initial)]
        for _ in range(self.iterations):
            counts.append(int(math.floor(counts[-1] * self.prune_ratio)))
        return counts

    def problems(self) -> List[str]:
        p = []
        if not 0.0 < self.prune_ratio <= 1.0:
            p.append(f"prune_ratio must lie in (0, 1], got {self.prune_ratio}")
        if self.iterations < 0:
            p.append(f"iterations must be >= 0, got {self.iterations}")
        if self.n_final < 8:
            p.append(f"n_final must be >= 8, got {self.n_final}")
        if not p and self.survivor_counts()[-1] != self.n_final:
            p.append(
                f"n_initial * prune_ratio^iterations must equal n_final: "
                f"{self.n_initial} -> {self.survivor_counts()} vs {self.n_final}"
            )
        if self.beta < 0:
            p.append(f"beta must be >= 0, got {self.beta}")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            p.append("warmup_steps must be >= 0")
        if not self.label_threshold > 0 or not self.eval_threshold > 0:
            p.append("thresholds must be > 0")
        if not self.lr > 0:
            p.append(f"lr must be > 0, got {self.lr}")
        if self.batch < 1 or self.epochs < 1:
            p.append("batch and epochs must be >= 1")
        if not isinstance(self.encoder, EncoderConfig):
            p.append("encoder must be an EncoderConfig")
        return p

    def resolved_warmup(self, total_steps: int) -> int:
        if self.warmup_steps is not None:
            return int(self.warmup_steps)
        if total_steps == REFERENCE_TOTAL_STEPS:
            return REFERENCE_WARMUP_STEPS
        return int(round(total_steps * REFERENCE_WARMUP_STEPS / REFERENCE_TOTAL_STEPS))

    def to_dict(self):
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d


def beta_at(step: int, warmup: int, beta: float) -> float:
    return 0.0 if step < warmup else beta


@dataclass
class PruningState:
    indices: List[torch.Tensor]  # per stage (B, n_k): original indices of that stage's input
    logits: List[torch.Tensor]  # per stage (B, n_k)
    features: torch.Tensor  # (B, N', C)
    weights: torch.Tensor  # (B, N')
    degenerate: torch.Tensor  # (B,) bool

    @property
    def final_indices(self) -> torch.Tensor:
        return self.indices[-1]


class CorrPruner(nn.Module):
    def __init__(self, cfg: FinetuneConfig = FinetuneConfig()):
        super().__init__()
        self.cfg = cfg
        stages = cfg.iterations + 1
        C = cfg.encoder.channels
        self.encoders = nn.ModuleList(CorrFormerEncoder(cfg.encoder) for _ in range(stages))
        self.predictors = nn.ModuleList(MLP([C, C, 1]) for _ in range(stages))
        self.log_temps = nn.Parameter(torch.zeros(stages))

    def temperatures(self) -> torch.Tensor:
        return self.log_temps.exp().clamp(*TEMP_RANGE)

    def predict_weights(self, stage: int, tokens: torch.Tensor) -> torch.Tensor:
        """Inlier logit per token; ``sigmoid`` gives the probability."""
        return self.predictors[stage](tokens)[..., 0]

    def prune_iteration(self, stage: int, corrs: torch.Tensor):
        """Encode, score, and keep the top ``floor(n * ratio)``.

        Returns (positions of survivors within ``corrs`` in ascending order, logits).
        """
        n = corrs.shape[1]
        keep = int(math.floor(n * self.cfg.prune_ratio))
        if keep < 8:
            raise TooFewCorrespondences(f"pruning {n} correspondences would keep only {keep}")
        logits = self.predict_weights(stage, self.encoders[stage](corrs))
        return top_survivors(logits, keep), logits

    def forward(self, corrs: torch.Tensor):
        """``(B, N, 4)`` correspondences -> (essential estimates ``(B, 3, 3)``, PruningState)."""
        if corrs.dim() != 3 or corrs.shape[-1] != 4:
            raise ShapeMismatch(f"expected (B, N, 4) correspondences, got {tuple(corrs.shape)}")
        B, N, _ = corrs.shape
        orig = torch.arange(N, device=corrs.device).expand(B, N)
        indices, logits = [], []
        cur = corrs
        for k in range(self.cfg.iterations):
            pos, lg = self.prune_iteration(k, cur)
            indices.append(orig)
            logits.append(lg)
            orig = torch.gather(orig, 1, pos)
            cur = torch.gather(cur, 1, pos[..., None].expand(-1, -1, 4))
        feats = self.encoders[-1](cur)
        lg = self.predict_weights(self.cfg.iterations, feats)
        indices.append(orig)
        logits.append(lg)
        w = weights_from_logits(lg)
        E, degenerate = weighted_eight_point(cur, w, check=False, return_degenerate=True)
        return E, PruningState(indices, logits, feats, w, degenerate)

    def load_pretrained(self, source) -> None:
        """Initialize every stage's encoder from a pre-training checkpoint (path or arrays)."""
        arrays = load_checkpoint(source)[0] if not isinstance(source, dict) else source
        for enc in self.encoders:
            load_into(enc, arrays, ENCODER_NAMESPACE)


def top_survivors(logits: torch.Tensor, keep: int) -> torch.Tensor:
    """Positions of the ``keep`` largest logits, ties by ascending position, returned sorted."""
    order = torch.sort(logits.detach(), dim=-1, descending=True, stable=True).indices[..., :keep]
    return torch.sort(order, dim=-1).values


def finetune_forward(model: CorrPruner, corrs: torch.Tensor):
    return model(corrs)


def balanced_bce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Class-balanced BCE per row: ``0.5 * mean_pos + 0.5 * mean_neg``.

    Equivalent to inverse-frequency weights ``n / (2 n_c)``. A row missing a
    class is averaged over the class it has.
    """
    labels = labels.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    n_pos = labels.sum(-1)
    n_neg = (1 - labels).sum(-1)
    mean_pos = (bce * labels).sum(-1) / n_pos.clamp_min(1)
    mean_neg = (bce * (1 - labels)).sum(-1) / n_neg.clamp_min(1)
    both = (n_pos > 0) & (n_neg > 0)
    return torch.where(both, 0.5 * (mean_pos + mean_neg), mean_pos + mean_neg)


def class_balance_weights(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=bool)
    n = labels.size
    n_pos = labels.sum()
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        return np.ones(n)
    return np.where(labels, n / (2.0 * n_pos), n / (2.0 * n_neg))


def loss_classification(logits: Sequence[torch.Tensor], labels: Sequence[torch.Tensor], temperatures: torch.Tensor) -> torch.Tensor:
    """Sum over stages of the balanced BCE on temperature-scaled logits (batch mean)."""
    total = 0
    for k, (lg, lb) in enumerate(zip(logits, labels)):
        if lg.shape[-1] == 0:
            raise EmptyIteration(f"stage {k} has no survivors")
        total = total + balanced_bce(temperatures[k] * lg, lb).mean()
    return total


def loss_geometric(E_hat: torch.Tensor, E_true, corrs, threshold: float = PRETRAIN_THRESHOLD, clamp: float = GEO_CLAMP, valid=None):
    """Mean clamped symmetric epipolar distance of the true inliers under ``E_hat``.

    Batched over a leading dimension; rows without inliers (or not ``valid``)
    are skipped and :class:`NoInliers` is raised if none remain.
    """
    E_hat = E_hat.to(torch.float64)
    c = torch.as_tensor(corrs).to(torch.float64)
    Et = torch.as_tensor(E_true).to(torch.float64)
    squeeze = E_hat.dim() == 2
    if squeeze:
        E_hat, c, Et = E_hat[None], c[None], Et[None]
    with torch.no_grad():
        inl = symmetric_epipolar_distance(c, Et) < threshold
    r = symmetric_epipolar_distance(c, E_hat).clamp(max=clamp)
    r = torch.where(inl, r, torch.zeros_like(r))
    cnt = inl.sum(-1)
    ok = cnt > 0
    if valid is not None:
        ok = ok & torch.as_tensor(valid, dtype=torch.bool)
    if not bool(ok.any()):
        raise NoInliers("no ground-truth inliers to score the estimate on")
    per = r.sum(-1) / cnt.clamp_min(1)
    return per[ok].mean()


def full_size_verification(E_hat, corrs, threshold: float = EVAL_THRESHOLD) -> np.ndarray:
    """Predicted inlier mask over the full initial set: residual under ``E_hat`` < threshold."""
    E_hat = E_hat.detach() if isinstance(E_hat, torch.Tensor) else E_hat
    r = symmetric_epipolar_distance(corrs, E_hat)
    r = r.numpy() if isinstance(r, torch.Tensor) else r
    return r < threshold


@dataclass
class SceneTensors:
    corrs: torch.Tensor  # (S, N, 4) float32
    labels: torch.Tensor  # (S, N) bool, residual under true E < label threshold
    essential: torch.Tensor  # (S, 3, 3) float64


def stack_scenes(scenes, label_threshold: float = PRETRAIN_THRESHOLD, dtype=torch.float32) -> SceneTensors:
    sizes = {len(s) for s in scenes}
    if len(sizes) != 1:
        raise ShapeMismatch(f"fine-tuning scenes must share one correspondence count, got {sorted(sizes)}")
    corrs = np.stack([s.correspondences for s in scenes])
    E = np.stack([s.essential for s in scenes])
    labels = symmetric_epipolar_distance(corrs, E) < label_threshold
    return SceneTensors(torch.as_tensor(corrs, dtype=dtype), torch.as_tensor(labels), torch.as_tensor(E))


def stage_labels(state: PruningState, labels: torch.Tensor) -> List[torch.Tensor]:
    """Labels of each stage's inputs, gathered from the full-set labels."""
    return [torch.gather(labels, 1, idx) for idx in state.indices]


def training_loss(model: CorrPruner, corrs, labels, essential, beta: float, cfg: FinetuneConfig):
    E_hat, state = model(corrs)
    l_cls = loss_classification(state.logits, stage_labels(state, labels), model.temperatures())
    # during warm-up the geometric term is only reported, not differentiated
    with contextlib.nullcontext() if beta > 0 else torch.no_grad():
        try:
            l_geo = loss_geometric(E_hat, essential, corrs, cfg.label_threshold, valid=~state.degenerate)
        except NoInliers:
            l_geo = torch.zeros((), dtype=torch.float64)
    loss = l_cls + beta * l_geo
    return loss, l_cls, l_geo


def finetune(model: CorrPruner, train_scenes, cfg: FinetuneConfig, val_scenes=None, trace_path=None, checkpoint_path=None, step_trace=None):
    """Minimize ``L_cls + beta * L_ess`` with Adam (no weight decay).

    ``beta`` is 0 for the warm-up steps and ``cfg.beta`` afterwards. Returns
    one metrics record per epoch (validation metrics when ``val_scenes`` is set).
    """
    from .evalkit import evaluate

    data = stack_scenes(train_scenes, cfg.label_threshold)
    if data.corrs.shape[1] != cfg.n_initial:
        raise ShapeMismatch(f"scenes have {data.corrs.shape[1]} correspondences, config expects {cfg.n_initial}")
    rng = np.random.default_rng(cfg.seed)
    S = data.corrs.shape[0]
    steps_per_epoch = math.ceil(S / cfg.batch)
    total = steps_per_epoch * cfg.epochs
    warmup = cfg.resolved_warmup(total)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=0.0)
    metrics = []
    sink = open(trace_path, "w") if trace_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(S)
            sums = {"L_cls": 0.0, "L_ess": 0.0, "loss": 0.0}
            for s in range(steps_per_epoch):
                idx = torch.as_tensor(order[s * cfg.batch : (s + 1) * cfg.batch])
                beta = beta_at(step, warmup, cfg.beta)
                loss, l_cls, l_geo = training_loss(model, data.corrs[idx], data.labels[idx], data.essential[idx], beta, cfg)
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(f"non-finite fine-tuning loss at step {step}", batch_id=step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                if step_trace is not None:
                    step_trace.append({"step": step, "beta": beta, "loss": loss.item()})
                sums["L_cls"] += l_cls.item()
                sums["L_ess"] += float(l_geo.detach())
                sums["loss"] += loss.item()
                step += 1
            rec = {"epoch": epoch, "step": step, **{k: v / steps_per_epoch for k, v in sums.items()}}
            if val_scenes is not None:
                rep = evaluate(model, val_scenes, cfg)
                rec.update({k: rep.aggregates[k] for k in ("P", "R", "F1", "AUC@5", "AUC@10", "AUC@20")})
            metrics.append(rec)
            if sink:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    if checkpoint_path:
        arrays = {}
        for k, enc in enumerate(model.encoders):
            arrays.update(module_arrays(enc, f"finetune.stage{k}.encoder."))
        arrays.update(module_arrays(model.predictors, "finetune.predictors."))
        arrays["finetune.log_temps"] = model.log_temps.detach().numpy()
        save_checkpoint(checkpoint_path, arrays, {"stage": "finetune", "config": cfg.to_dict()})
    return metrics


def load_finetuned(model: CorrPruner, source) -> None:
    arrays = load_checkpoint(source)[0] if not isinstance(source, dict) else source
    for k, enc in enumerate(model.encoders):
        load_into(enc, arrays, f"finetune.stage{k}.encoder.")
    load_into(model.predictors, arrays, "finetune.predictors.")
    with torch.no_grad():
        model.log_temps.copy_(torch.as_tensor(arrays["finetune.log_temps"]))
