"""Overfit the tiny full model on 8 synthetic tuples and report loss ratio / indicator effect."""
import argparse
import json
from pathlib import Path

from compdiff.experiments import overfit_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ae-steps", type=int, default=400)
    ap.add_argument("--out", default="runs/overfit")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = overfit_run(steps=args.steps, lr=args.lr, seed=args.seed, ae_steps=args.ae_steps,
                      out_dir=out / "checkpoint", log_path=out / "train_log.jsonl")
    summary = {
        "initial_loss": res.initial_loss,
        "final_loss": res.final_loss,
        "ratio": res.ratio,
        "sample_l2_00_vs_11": res.sample_l2,
        "ae_mae": res.ae_mae,
        "seconds": res.seconds,
    }
    (out / "loss.json").write_text(json.dumps({**summary, "step_losses": res.step_losses}, indent=2))
    for k, v in summary.items():
        print(f"{k:>20} {v:.5g}")


if __name__ == "__main__":
    main()
