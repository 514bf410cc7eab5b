"""All four ablation sweeps against a trained pair of toy checkpoints.

    python3 scripts/run_ablations.py --ckpt-dir runs/toy --out runs/ablations [--seeds 20]
"""
import argparse
import json
from pathlib import Path

from motionctl.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt-dir", type=Path, required=True)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", type=int, default=20)
    args = ap.parse_args()
    mim_ck = str(args.ckpt_dir / "token_concat.mjto")
    seeds = ["--set", f"ablate.seeds={json.dumps(list(range(args.seeds)))}"]
    for sweep in ("guided_steps", "lambda", "eta"):
        code = cli(["ablate", "--sweep", sweep, "--ckpt", mim_ck, "--out", str(args.out)] + seeds)
        if code:
            raise SystemExit(code)
    code = cli(["ablate", "--sweep", "fusion", "--ckpt", mim_ck, "--ckpt", str(args.ckpt_dir / "none.mjto"),
                "--out", str(args.out)])
    raise SystemExit(code)


if __name__ == "__main__":
    main()
