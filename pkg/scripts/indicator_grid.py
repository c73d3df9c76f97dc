"""Sample all four indicator settings for a few training tuples from one checkpoint."""
import argparse
from pathlib import Path

import numpy as np
import torch

from compdiff import data_pipeline as dp
from compdiff.diffusion import SamplerConfig, sample
from compdiff.generator import ALL_INDICATORS
from compdiff.model import load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--data", required=True, help="prepared dataset directory")
    ap.add_argument("--count", type=int, default=4)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/grid.png")
    args = ap.parse_args()

    model = load_checkpoint(args.checkpoint)
    tuples = dp.load_dataset(args.data)[::4][:args.count]
    rows = []
    for tp in tuples:
        bg = torch.from_numpy(tp.I_b) * 2 - 1
        fg = torch.from_numpy(tp.I_f) * 2 - 1
        cells = [tp.I_b, dp.resize_image(tp.I_f, tp.I_b.shape[1:])]
        for S in ALL_INDICATORS:
            img = sample(model, bg, fg, tp.B, S, SamplerConfig(ddim_steps=args.steps), seed=args.seed)
            cells.append((img.numpy() + 1) / 2)
        rows.append(np.concatenate(cells, axis=2))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dp.save_png(args.out, np.concatenate(rows, axis=1))
    print(f"columns: background, foreground, {', '.join(S.task for S in ALL_INDICATORS)} -> {args.out}")


if __name__ == "__main__":
    main()
