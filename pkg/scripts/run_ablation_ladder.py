#!/usr/bin/env python3
"""Train the ablation ladder on one synthetic corpus and print relative gains.

Rungs: flat baseline -> +hierarchical gating -> +target MLM -> +auxiliary MLM
-> +utterance insertion. Every rung shares the corpora and the root seed, so
each comparison isolates the switched feature.
"""

import argparse
import json
from pathlib import Path

from dstlab.cli import ExperimentSpec, run_experiment
from dstlab.corpus import SynthConfig
from dstlab.evaluation import compare_reports, load_report
from dstlab.perturbation import PerturbationConfig
from dstlab.training import TrainConfig

RUNGS = [
    ("base-flat", dict(status_mode="flat")),
    ("hierarchical", dict()),
    ("target-mlm", dict(mlm_mode="target_only")),
    ("aux-mlm", dict(mlm_mode="target_plus_auxiliary")),
    ("insertion", dict(mlm_mode="target_plus_auxiliary",
                       perturbation=PerturbationConfig())),
]


def fmt(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/ablation-ladder")
    parser.add_argument("--dialogues", type=int, default=2000)
    parser.add_argument("--eval-dialogues", type=int, default=200)
    parser.add_argument("--steps", type=int, default=1000)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--overwrite", action="store_true")
    args = parser.parse_args()

    out = Path(args.out)
    reports = {}
    for name, overrides in RUNGS:
        spec = ExperimentSpec(
            name=f"ladder/{name}",
            out_dir=str(out / name),
            synth=SynthConfig(num_dialogues=args.dialogues),
            eval_dialogues=args.eval_dialogues,
            train=TrainConfig(steps=args.steps, batch_size=args.batch_size,
                              learning_rate=1e-3, lr_warmup_steps=50,
                              seed=args.seed, **overrides),
            overwrite=args.overwrite,
        )
        run_dir = run_experiment(spec)
        r = reports[name] = load_report(run_dir / "eval_report.json")
        print(f"{name:>13}: jga_all={r.jga_all:.4f} short={fmt(r.jga_short)} "
              f"long={fmt(r.jga_long)} oracle={fmt(r.oracle_jga)}")

    base_name = RUNGS[0][0]
    base = reports[base_name]
    print(f"\nrelative gains vs {base_name}")
    gains_doc = {}
    for name, _ in RUNGS[1:]:
        gains = compare_reports(base, reports[name]).gains
        gains_doc[name] = gains
        cells = []
        for metric in ("jga_all", "jga_short", "jga_long"):
            g = gains[metric]["relative_gain"]
            cells.append(f"{metric} " + ("n/a" if g is None else f"{100 * g:+.1f}%"))
        print(f"{name:>13}: " + "  ".join(cells))

    (out / "ladder.json").write_text(
        json.dumps({"base": base_name, "gains": gains_doc}, indent=2) + "\n",
        encoding="utf-8")
    print(f"\nwrote {out / 'ladder.json'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
