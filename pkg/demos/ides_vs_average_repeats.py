"""Compare IDES and repeat averaging on low-SNR synthetic participants.

Each participant shares the same concepts and image features but has its own
mixing matrix and noise. Both samplers train an identical encoder; the paired
Wilcoxon test asks whether IDES wins consistently on the OOD bank.

    python3 demos/ides_vs_average_repeats.py --participants 4 --epochs 30
"""

import argparse
import time

import numpy as np
import torch

from eeg_align.encoder import EncoderConfig
from eeg_align.eval_stats import evaluate_participant, wilcoxon_signed_rank
from eeg_align.sampling import SamplerConfig
from eeg_align.synthlab import SynthSpec, gen_synthetic, split_banks, snr_estimate
from eeg_align.trainer import TrainConfig, train

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--participants", type=int, default=10)
parser.add_argument("--epochs", type=int, default=60)
parser.add_argument("--snr", type=float, default=0.005)
args = parser.parse_args()

torch.set_num_threads(1)
enc = EncoderConfig(n_channels=16, n_samples=64, embed_dim=32, n_filters=16, temporal_kernel=9,
                    pool_kernel=9, pool_stride=4, dropout=0.0)
scores = {"average_repeats": [], "ides": []}
t0 = time.time()
for p in range(args.participants):
    spec = SynthSpec(n_concepts=30, images_per_concept=10, repeats=4, feat_dim=32, snr=args.snr,
                     concept_spread=0.2, test_repeats=80, ood_images=3, seed=0, participant_seed=p)
    epochs, bank = gen_synthetic(spec)
    if p == 0:
        print(f"empirical single-trial SNR: {snr_estimate(epochs.split('train')):.4f}")
    train_bank, id_bank, ood_bank = split_banks(bank)
    for method in scores:
        cfg = TrainConfig(epochs=args.epochs, lr=2e-4, batch_size=20, seed=p,
                          sampler=SamplerConfig(method=method, k=7, seed=p))
        model, _ = train(cfg, epochs, train_bank, enc)
        ood = evaluate_participant(model, epochs.split("test"), id_bank, ood_bank, sampler=method)[1]
        scores[method].append(ood.top1)
    print(f"p{p:02d}: average_repeats {scores['average_repeats'][-1]:.3f}  ides {scores['ides'][-1]:.3f}")

a, b = np.array(scores["average_repeats"]), np.array(scores["ides"])
print(f"mean OOD top-1: average_repeats {a.mean():.3f}, ides {b.mean():.3f} (chance {1 / 30:.3f})")
if np.count_nonzero(b - a) >= 4:
    w, p = wilcoxon_signed_rank(a, b)
    print(f"paired Wilcoxon: W = {w:g}, two-sided p = {p:.4g}")
else:
    print("too few non-zero differences for a Wilcoxon test")
print(f"{time.time() - t0:.0f} s")
