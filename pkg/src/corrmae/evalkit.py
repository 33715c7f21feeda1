"""Metrics, evaluation reports, and the masking ablation harness."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import torch

from . import __version__
from .errors import (
    AmbiguousCheirality,
    DegenerateConfiguration,
    EmptyInput,
    LengthMismatch,
    ReportInconsistent,
    TooFewCorrespondences,
)
from .geometry import decompose_essential, pose_auc, pose_error, weighted_eight_point

REPORT_SCHEMA = "corrmae-eval-report"
REPORT_VERSION = 1
FAILURE_ERROR = 180.0
AUC_THRESHOLDS = (5.0, 10.0, 20.0)


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    zero_division: bool


def precision_recall_f1(predicted, truth) -> PRF:
    """Precision, recall, F1; any 0/0 becomes 0 and sets ``zero_division``."""
    p = np.asarray(predicted, dtype=bool).ravel()
    t = np.asarray(truth, dtype=bool).ravel()
    if p.shape != t.shape:
        raise LengthMismatch(f"{p.size} predictions vs {t.size} labels")
    tp = int(np.sum(p & t))
    n_pred = int(p.sum())
    n_true = int(t.sum())
    flag = False
    if n_pred:
        P = tp / n_pred
    else:
        P, flag = 0.0, True
    if n_true:
        R = tp / n_true
    else:
        R, flag = 0.0, True
    if P + R > 0:
        F1 = 2 * P * R / (P + R)
    else:
        F1, flag = 0.0, True
    return PRF(P, R, F1, flag)


def aggregate(records: Sequence[dict]) -> Dict[str, float]:
    if not records:
        raise EmptyInput("no per-scene records to aggregate")
    errs = [r["pose_err"] for r in records]
    aucs = pose_auc(errs, AUC_THRESHOLDS)
    out = {f"AUC@{int(t)}": a for t, a in zip(AUC_THRESHOLDS, aucs)}
    for k in ("P", "R", "F1"):
        out[k] = float(np.mean([r[k] for r in records]))
    out["failures"] = int(sum(bool(r["failed"]) for r in records))
    return out


@dataclass
class EvalReport:
    records: List[dict]
    aggregates: Dict[str, float]
    config: dict = field(default_factory=dict)
    seed: int = 0
    version: str = __version__

    def check(self, tol: float = 1e-9) -> None:
        fresh = aggregate(self.records)
        for k, v in fresh.items():
            if k not in self.aggregates or abs(self.aggregates[k] - v) > tol:
                raise ReportInconsistent(f"aggregate {k!r} does not match its records")

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "schema_version": REPORT_VERSION,
            "artifact_version": self.version,
            "seed": self.seed,
            "config": self.config,
            "aggregates": self.aggregates,
            "records": self.records,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema") != REPORT_SCHEMA or d.get("schema_version") != REPORT_VERSION:
            raise ReportInconsistent("not a version-1 evaluation report")
        rep = cls(d["records"], d["aggregates"], d.get("config", {}), d.get("seed", 0), d.get("artifact_version", ""))
        rep.check()
        return rep

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def score_scene(E_hat, scene, eval_threshold: float, failure: Optional[str] = None) -> dict:
    """Per-scene record: pose errors from ``E_hat`` plus full-size P/R/F1."""
    from .finetune import full_size_verification

    rec = {"n": len(scene), "failed": False, "failure": None}
    if failure is None:
        pred = full_size_verification(E_hat, scene.correspondences, eval_threshold)
        prf = precision_recall_f1(pred, scene.inlier_mask)
        rec.update(P=prf.precision, R=prf.recall, F1=prf.f1)
        support = scene.correspondences[pred] if pred.any() else scene.correspondences
        try:
            est = decompose_essential(E_hat, support)
            rot, trans = pose_error(est, scene.pose)
            rec.update(rot_err=rot, trans_err=trans, pose_err=max(rot, trans))
            return rec
        except AmbiguousCheirality as e:
            failure = f"AmbiguousCheirality: {e}"
    else:
        rec.update(P=0.0, R=0.0, F1=0.0)
    rec.update(failed=True, failure=failure, rot_err=FAILURE_ERROR, trans_err=FAILURE_ERROR, pose_err=FAILURE_ERROR)
    return rec


@torch.no_grad()
def evaluate(model, scenes, cfg, oracle: bool = False, batch: int = 16, seed: int = 0) -> EvalReport:
    """Score ``model`` (a ``CorrPruner``) on ``scenes``.

    ``oracle=True`` skips the network and feeds the ground-truth inlier mask
    as weights over all correspondences. Failed scenes score 180 degrees.
    """
    from .finetune import stack_scenes

    eval_threshold = cfg.eval_threshold
    records = []
    if oracle:
        for s in scenes:
            failure, E_hat = None, None
            try:
                E_hat = weighted_eight_point(s.correspondences, s.inlier_mask.astype(np.float64))
            except (DegenerateConfiguration, TooFewCorrespondences) as e:
                failure = f"{type(e).__name__}: {e}"
            records.append(score_scene(E_hat, s, eval_threshold, failure))
    else:
        model.eval()
        dtype = next(model.parameters()).dtype
        data = stack_scenes(scenes, cfg.label_threshold, dtype=dtype)
        for start in range(0, len(scenes), batch):
            E_hat, state = model(data.corrs[start : start + batch])
            for j in range(E_hat.shape[0]):
                s = scenes[start + j]
                failure = None
                if bool(state.degenerate[j]) or not bool(torch.isfinite(E_hat[j]).all()):
                    failure = "DegenerateConfiguration: weighted normal matrix has no unique null vector"
                records.append(score_scene(E_hat[j].numpy(), s, eval_threshold, failure))
        model.train()
    for i, r in enumerate(records):
        r["scene"] = i
    config = cfg.to_dict() if hasattr(cfg, "to_dict") else dict(cfg)
    config["oracle"] = oracle
    return EvalReport(records, aggregate(records), config, seed)


# The five rows of the masking ablation table: (kind, ratio, align).
MASK_SWEEP_ROWS = (
    ("random", 0.4, False),
    ("random", 0.6, False),
    ("random", 0.8, False),
    ("block", 0.6, False),
    ("random", 0.6, True),
)


def ablation_mask_sweep(
    pretrain_corpus,
    train_scenes,
    val_scenes,
    pretrain_cfg,
    finetune_cfg,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    rows: Sequence[tuple] = MASK_SWEEP_ROWS,
    lam_on: Optional[float] = None,
    progress=None,
) -> dict:
    """Pre-train then fine-tune once per (row, seed); returns a table-shaped grid.

    Each cell reports the final-epoch pre-training loss (x100) and validation
    AUC@5/10/20 with per-seed values and means. ``align`` off means lambda = 0;
    on uses ``lam_on`` (default: ``pretrain_cfg.lam``).
    """
    from .finetune import CorrPruner, finetune
    from .mae import CorrMAE

    lam_on = pretrain_cfg.lam if lam_on is None else lam_on
    table = []
    for kind, ratio, align in rows:
        cell = {"kind": kind, "ratio": ratio, "align": align, "per_seed": []}
        for seed in seeds:
            pcfg = replace(pretrain_cfg, mask_kind=kind, ratio=ratio, lam=lam_on if align else 0.0, seed=seed)
            torch.manual_seed(seed)
            mae = CorrMAE(pcfg.encoder, pcfg.decoder_depth)
            trace = pretrain_model(mae, pretrain_corpus, pcfg)
            last = [r for r in trace if r["epoch"] == trace[-1]["epoch"]]
            loss = 100.0 * float(np.mean([r["L_rec_s"] + r["L_rec_t"] for r in last]))
            fcfg = replace(finetune_cfg, seed=seed, encoder=pcfg.encoder)
            torch.manual_seed(10_000 + seed)
            pruner = CorrPruner(fcfg)
            pruner.load_pretrained({k: v for k, v in _encoder_arrays(mae).items()})
            finetune(pruner, train_scenes, fcfg)
            rep = evaluate(pruner, val_scenes, fcfg)
            entry = {"seed": seed, "loss_x100": loss, **{k: rep.aggregates[k] for k in ("AUC@5", "AUC@10", "AUC@20")}}
            cell["per_seed"].append(entry)
            if progress:
                progress(kind, ratio, align, entry)
        for k in ("loss_x100", "AUC@5", "AUC@10", "AUC@20"):
            cell[k] = float(np.mean([e[k] for e in cell["per_seed"]]))
        table.append(cell)
    return {"rows": table, "seeds": list(seeds), "pretrain": pretrain_cfg.to_dict(), "finetune": finetune_cfg.to_dict()}


def encoder_sweep(train_scenes, val_scenes, finetune_cfg, variants: Dict[str, object], seeds: Sequence[int] = (0, 1, 2, 3, 4), progress=None) -> dict:
    """Fine-tune from scratch once per (encoder variant, seed) and report validation AUC and F1.

    ``variants`` maps a label to an ``EncoderConfig``; used for the bi-level
    ablation (``levels``) and the neighbourhood-size choice (``k``).
    """
    from .finetune import CorrPruner, finetune

    out = {}
    for name, enc in variants.items():
        per_seed = []
        for seed in seeds:
            fcfg = replace(finetune_cfg, seed=seed, encoder=enc)
            torch.manual_seed(10_000 + seed)
            model = CorrPruner(fcfg)
            finetune(model, train_scenes, fcfg)
            agg = evaluate(model, val_scenes, fcfg).aggregates
            entry = {"seed": seed, **{k: agg[k] for k in ("F1", "AUC@5", "AUC@10", "AUC@20")}}
            per_seed.append(entry)
            if progress:
                progress(name, entry)
        cell = {"per_seed": per_seed, "encoder": enc.to_dict()}
        for k in ("F1", "AUC@5", "AUC@10", "AUC@20"):
            cell[k] = float(np.mean([e[k] for e in per_seed]))
        out[name] = cell
    return out


def pretrain_model(model, corpus, cfg):
    from .mae import pretrain

    return pretrain(model, corpus, cfg)


def _encoder_arrays(mae) -> dict:
    from .checkpoint import ENCODER_NAMESPACE, module_arrays

    return module_arrays(mae.encoder, ENCODER_NAMESPACE)


def format_table(grid: dict) -> str:
    lines = [f"{'kind':<7}{'ratio':>6}{'align':>7}{'loss':>9}{'AUC@5':>8}{'AUC@10':>8}{'AUC@20':>8}"]
    for c in grid["rows"]:
        lines.append(
            f"{c['kind']:<7}{int(round(100 * c['ratio'])):>6}{('yes' if c['align'] else '-'):>7}"
            f"{c['loss_x100']:>9.3f}{c['AUC@5']:>8.2f}{c['AUC@10']:>8.2f}{c['AUC@20']:>8.2f}"
        )
    return "\n".join(lines)
