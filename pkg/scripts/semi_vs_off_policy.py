"""Clipped buffer training against the unclipped ablation: held-out reward and weight displacement.

    python scripts/semi_vs_off_policy.py --out runs/semi --seeds 0 1 2 3 4
"""
from _common import base_parser, reference_dir, seed_dir, setup

from arcopo.cli import _suite, cmd_train
from arcopo.toygen import load_params


def main():
    args = base_parser(__doc__.splitlines()[0]).parse_args()
    cfg, root = setup(args)
    ref = load_params(reference_dir(cfg, root) / "reference.ckpt")
    ref_held = _suite(cfg).held_out(ref)["reward"]
    print(f"reference held-out reward {ref_held:.3f}")
    for s in args.seeds:
        c, out = seed_dir(cfg, root, s)
        semi = cmd_train(c, out, "semi")
        off = cmd_train(c, out, "off")
        print(
            f"seed {s}: held-out semi {semi['held_out']['reward']:.3f} off {off['held_out']['reward']:.3f}"
            f"   displacement semi {semi['displacement']:.4f} off {off['displacement']:.4f}"
        )


if __name__ == "__main__":
    main()
