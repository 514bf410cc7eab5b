"""Train the MIM-conditioned and MIM-less toy models on the same data and seeds.

    python3 scripts/train_toy_pair.py --out runs/toy [--steps 2000]

Writes token_concat.mjto and none.mjto, the format the acceptance suite reads
from MOTIONCTL_ACCEPTANCE_CACHE.
"""
import argparse
import time
from dataclasses import replace
from pathlib import Path

from motionctl import experiments as ex
from motionctl.checkpoint import Checkpoint, save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--fusions", nargs="+", default=["token_concat", "none"])
    args = ap.parse_args()
    recipe = ex.ToyRecipe()
    if args.steps is not None:
        recipe = replace(recipe, steps=args.steps)
    args.out.mkdir(parents=True, exist_ok=True)
    ds = ex.toy_dataset(recipe)
    for fusion in args.fusions:
        t0 = time.perf_counter()

        def log(step, loss):
            if (step + 1) % 250 == 0:
                print(f"{fusion} step {step + 1} loss {loss:.4f} ({time.perf_counter() - t0:.0f}s)", flush=True)

        model = ex.train_toy(fusion, recipe, ds, log=log)
        save_checkpoint(args.out / f"{fusion}.mjto", Checkpoint(model, recipe.steps, ds.calibration,
                                                               extra={"token_seed": recipe.token_seed}))
        print(f"{fusion}: {time.perf_counter() - t0:.0f}s -> {args.out / (fusion + '.mjto')}")


if __name__ == "__main__":
    main()
