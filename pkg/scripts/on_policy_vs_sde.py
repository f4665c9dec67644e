"""Reward curves of on-policy contrastive training against the SDE-GRPO baseline, several seeds.

    python scripts/on_policy_vs_sde.py --out runs/curves --seeds 0 1 2 3 4
"""
import numpy as np

from _common import base_parser, seed_dir, setup

from arcopo.cli import cmd_train


def main():
    args = base_parser(__doc__.splitlines()[0]).parse_args()
    cfg, root = setup(args)
    rows = []
    for s in args.seeds:
        c, out = seed_dir(cfg, root, s)
        on = cmd_train(c, out, "on")
        sde = cmd_train(c, out, "sde")
        rows.append((on["first10"], on["last10"], sde["first10"], sde["last10"]))
        print(f"seed {s}: on {on['first10']:.3f} -> {on['last10']:.3f}   sde {sde['first10']:.3f} -> {sde['last10']:.3f}")
    med = np.median(np.array(rows), axis=0)
    print(f"median: on {med[0]:.3f} -> {med[1]:.3f}   sde {med[2]:.3f} -> {med[3]:.3f}")
    print("curves are in", root, "(curves_on_policy.csv, curves_sde.csv per seed)")


if __name__ == "__main__":
    main()
