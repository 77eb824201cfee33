#!/usr/bin/env python3
"""Run the insertion-robustness grid (source x policy x probability x count).

Thin wrapper over `dstlab sweep`: builds a spec for a synthetic corpus, runs
every grid cell, and leaves sweep.csv / sweep.json in the output directory.
"""

import argparse
import json
from pathlib import Path

from dstlab.cli import ExperimentSpec
from dstlab.cli import main as cli_main
from dstlab.corpus import SynthConfig
from dstlab.training import TrainConfig


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/perturbation-sweep")
    parser.add_argument("--dialogues", type=int, default=400)
    parser.add_argument("--eval-dialogues", type=int, default=80)
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--grid", default=None,
                        help="JSON file overriding the default 81-cell grid")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = ExperimentSpec(
        name="perturbation-sweep",
        out_dir=str(out),
        synth=SynthConfig(num_dialogues=args.dialogues),
        eval_dialogues=args.eval_dialogues,
        train=TrainConfig(steps=args.steps, batch_size=args.batch_size,
                          learning_rate=1e-3, lr_warmup_steps=50,
                          seed=args.seed),
        overwrite=True,
    )
    spec_path = out / "spec.json"
    spec_path.write_text(json.dumps(spec.to_json(), indent=2) + "\n",
                         encoding="utf-8")

    argv = ["sweep", "--spec", str(spec_path), "--out", str(out)]
    if args.grid:
        argv += ["--grid", args.grid]
    return cli_main(argv)


if __name__ == "__main__":
    raise SystemExit(main())
