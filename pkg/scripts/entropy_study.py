"""Substitute the initial noise or one solver noise at a pivot chunk and measure downstream divergence.

    python scripts/entropy_study.py --out runs/entropy
"""
from _common import base_parser, reference_dir, setup

from arcopo.cli import cmd_entropy_study
import json


def main():
    args = base_parser(__doc__.splitlines()[0]).parse_args()
    cfg, root = setup(args)
    ref = reference_dir(cfg, root)
    path = cmd_entropy_study(cfg, ref)
    for line in path.read_text().splitlines()[1:]:
        rec = json.loads(line)
        if "summary" in rec:
            s = rec["summary"]
            print(f"pivot {s['pivot']}: init {s['init']:.4f}  max solver {s['max_solver']:.4f}  ratio {s['ratio']:.2f}")
        else:
            print(f"  pivot {rec['pivot']} site {rec['site']}: {rec['total']:.4f}")


if __name__ == "__main__":
    main()
