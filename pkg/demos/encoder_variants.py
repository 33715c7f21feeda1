"""Encoder ablations trained from scratch: which levels to keep, and the kNN size.

``levels`` drops the local (graph) or global (attention) path of every
block; the k sweep checks the neighbourhood size used by the graph level.

    python3 demos/encoder_variants.py [--seeds 3] [--epochs 3]
"""
import argparse

import torch

from corrmae.corrformer import EncoderConfig
from corrmae.evalkit import encoder_sweep
from corrmae.finetune import FinetuneConfig
from corrmae.synthdata import SceneConfig, generate_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--train", type=int, default=400)
    args = ap.parse_args()
    torch.set_num_threads(1)

    train = generate_dataset(SceneConfig(n_points=100, outlier_ratio=0.5, seed=101), args.train)
    val = generate_dataset(SceneConfig(n_points=100, outlier_ratio=0.5, seed=202), 100)
    cfg = FinetuneConfig(n_initial=100, n_final=25, batch=16, epochs=args.epochs, lr=1e-3)
    # the default encoder (both levels, k=9) appears once and serves both comparisons
    variants = {"both, k=9": EncoderConfig(channels=32, heads=4)}
    variants.update({f"{lv} only": EncoderConfig(channels=32, heads=4, levels=lv) for lv in ("local", "global")})
    variants.update({f"both, k={k}": EncoderConfig(channels=32, heads=4, k=k) for k in (6, 12)})
    res = encoder_sweep(train, val, cfg, variants, seeds=range(args.seeds), progress=lambda name, e: print(name, e["seed"], round(e["AUC@5"], 2), flush=True))
    print(f"\n{'variant':<16}{'F1':>8}{'AUC@5':>8}{'AUC@20':>8}")
    for name, cell in res.items():
        print(f"{name:<16}{cell['F1']:>8.3f}{cell['AUC@5']:>8.2f}{cell['AUC@20']:>8.2f}")


if __name__ == "__main__":
    main()
