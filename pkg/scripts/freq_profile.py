"""Layer-wise high-frequency norms of vanilla-trained desk models."""
import argparse

from freqbias.analysis import layer_freq_profile
from freqbias.desk import DeskRecipe, vanilla_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--beta", type=float, default=0.125)
    args = ap.parse_args()
    r = DeskRecipe()
    for s in args.seeds:
        m, te = vanilla_model(r, s)
        prof = layer_freq_profile(m, te.images[:128], args.beta)
        print(f"seed {s}")
        for row in prof.rows:
            mark = " <- stage end" if row.is_stage_end else ""
            print(f"  {row.layer:2d} {row.name:6s} stage {row.stage:2d} {row.high_freq_norm:9.3f}{mark}")


if __name__ == "__main__":
    main()
