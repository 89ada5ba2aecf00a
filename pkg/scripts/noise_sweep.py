"""Success rate of band-limited uniform noise versus cutoff on vanilla-trained desk models."""
import argparse

import numpy as np

from freqbias.analysis import freq_noise_sweep
from freqbias.desk import DeskRecipe, vanilla_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--betas", type=float, nargs="+", default=[0.0625, 0.125, 0.25, 0.5, 1.0])
    ap.add_argument("--eps", type=float, default=128 / 255)
    ap.add_argument("--draws", type=int, default=2)
    args = ap.parse_args()
    r = DeskRecipe()
    rates = []
    for s in args.seeds:
        m, te = vanilla_model(r, s)
        rep = freq_noise_sweep(m, te, args.betas, args.eps, args.draws, seed=s)
        rates.append(rep.success_rate)
        print(f"seed {s} ({rep.evaluated} correct): " + " ".join(f"{v:.3f}" for v in rep.success_rate))
    print("mean " + " ".join(f"beta={b}:{v:.3f}" for b, v in zip(args.betas, np.mean(rates, axis=0))))


if __name__ == "__main__":
    main()
