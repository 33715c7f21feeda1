"""Pre-trained vs from-scratch fine-tuning on toy scenes.

Pre-trains a small CorrMAE on inlier-only correspondences, then fine-tunes
the pruner twice per seed under the same budget: once from the pre-trained
encoder, once from random init. Prints validation F1 and AUC@5 per seed.

    python3 demos/transfer.py [--seeds 5] [--pretrain-epochs 20]
"""
import argparse

import numpy as np
import torch

from corrmae.checkpoint import ENCODER_NAMESPACE, module_arrays
from corrmae.corrformer import EncoderConfig
from corrmae.finetune import CorrPruner, FinetuneConfig, finetune
from corrmae.mae import CorrMAE, PretrainConfig, epoch_means, pretrain
from corrmae.synthdata import SceneConfig, generate_dataset, pretrain_corpus


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--pretrain-epochs", type=int, default=20)
    ap.add_argument("--corpus", type=int, default=2000)
    args = ap.parse_args()
    torch.set_num_threads(1)

    enc = EncoderConfig(channels=32, heads=4)
    corpus = pretrain_corpus(generate_dataset(SceneConfig(n_points=500, outlier_ratio=0.9, seed=11), args.corpus))
    print(f"pre-training on {len(corpus)} scenes, mean M = {np.mean([len(c) for c in corpus]):.1f}")
    torch.manual_seed(0)
    mae = CorrMAE(enc, 1)
    trace = pretrain(mae, corpus, PretrainConfig(epochs=args.pretrain_epochs, batch=64, encoder=enc))
    means = epoch_means(trace)
    print(f"reconstruction loss {means[0]:.4f} -> {means[-1]:.4f}")
    arrays = module_arrays(mae.encoder, ENCODER_NAMESPACE)

    # 50% outliers and a one-epoch budget: the regime where init matters most
    train = generate_dataset(SceneConfig(n_points=100, outlier_ratio=0.5, seed=101), 800)
    val = generate_dataset(SceneConfig(n_points=100, outlier_ratio=0.5, seed=202), 200)
    print(f"{'seed':>4} {'F1 pre':>8} {'F1 scr':>8} {'AUC5 pre':>9} {'AUC5 scr':>9}")
    for seed in range(args.seeds):
        cfg = FinetuneConfig(n_initial=100, n_final=25, batch=16, epochs=1, lr=1e-3, seed=seed, encoder=enc)
        row = {}
        for arm in ("pre", "scratch"):
            torch.manual_seed(1000 + seed)
            model = CorrPruner(cfg)
            if arm == "pre":
                model.load_pretrained(arrays)
            row[arm] = finetune(model, train, cfg, val_scenes=val)[-1]
        print(f"{seed:>4} {row['pre']['F1']:>8.3f} {row['scratch']['F1']:>8.3f} {row['pre']['AUC@5']:>9.2f} {row['scratch']['AUC@5']:>9.2f}")


if __name__ == "__main__":
    main()
