"""Guidance strength sweep on a trained checkpoint: mean direction scores per eta.

    python3 scripts/calibrate_eta.py --ckpt runs/toy/token_concat.mjto --etas 1 2.5 5 10 20 --seeds 10
"""
import argparse

import numpy as np

from motionctl import diffusion, dmc
from motionctl import experiments as ex
from motionctl.checkpoint import load_checkpoint
from motionctl.vocab import build_token_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--etas", type=float, nargs="+", default=[0.03, 0.1, 0.3, 1.0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--guided-steps", type=int, default=10)
    args = ap.parse_args()
    ck = load_checkpoint(args.ckpt)
    model = ck.model
    table = build_token_table(model.config.token_dim, ck.extra.get("token_seed", 0))
    sched = diffusion.build_schedule(*model.config.schedule)
    base = dmc.GuidanceConfig(t_final=sched.steps - args.guided_steps + 1)
    seeds = range(args.seeds)
    rows = ex.eta_sweep(model, table, sched, base, [0.0] + args.etas, seeds)
    print("eta      mIoU    AP50      CD")
    for eta in [0.0] + args.etas:
        sel = [r for r in rows if r["eta"] == eta]
        print(f"{eta:5g}  {np.mean([r['mIoU'] for r in sel]):6.3f}  {np.mean([r['AP50'] for r in sel]):6.3f}"
              f"  {np.nanmean([r['CD'] for r in sel]):6.2f}")


if __name__ == "__main__":
    main()
