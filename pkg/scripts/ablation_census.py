"""Parameter census of each ablation variant (tiny and default presets)."""
import argparse

from compdiff.generator import Ablation, UNet, parameter_census
from compdiff.model import PRESETS


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    ap.add_argument("--by-module", action="store_true", help="also list counts per top-level module")
    args = ap.parse_args()

    for a in Ablation:
        unet = UNet(PRESETS[args.preset](a).generator)
        census = parameter_census(unet)
        print(f"{a.value:<24} {sum(census.values()):>10,d}")
        if args.by_module:
            for name, n in census.items():
                print(f"    {name:<20} {n:>10,d}")


if __name__ == "__main__":
    main()
