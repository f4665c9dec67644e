"""Merge the on-policy adapter on top of the semi adapter at several scales and apply the selection rule.

    python scripts/scale_sweep.py --out runs/sweep --seeds 1
    python scripts/scale_sweep.py --config docs/trade_off.cfg --out runs/trade_off --seeds 1
"""
from _common import base_parser, seed_dir, setup

from arcopo.cli import cmd_sweep, cmd_train


def main():
    args = base_parser(__doc__.splitlines()[0]).parse_args()
    cfg, root = setup(args)
    for s in args.seeds:
        c, out = seed_dir(cfg, root, s)
        for mode, name in (("semi", "semi"), ("on", "on_policy")):
            if not (out / f"{name}.lora").exists():
                cmd_train(c, out, mode)
        print(f"seed {s}")
        print(cmd_sweep(c, out).read_text())


if __name__ == "__main__":
    main()
