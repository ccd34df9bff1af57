"""Regenerate the shipped supLM critical-value table (takes several minutes)."""

import argparse
import time

from palmtree import suplm_dist

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--paths", type=int, default=400_000)
    ap.add_argument("--ds", type=float, default=0.005)
    ap.add_argument("--seed", type=int, default=20170501)
    args = ap.parse_args()
    t0 = time.time()
    suplm_dist.save_table(n_paths=args.paths, ds=args.ds, seed=args.seed)
    print(f"wrote {suplm_dist.TABLE_PATH} in {time.time() - t0:.0f}s")
