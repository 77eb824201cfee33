"""Command-line experiment runner.

Subcommands:

    generate   write synthetic train/dev/test corpora plus a manifest
    perturb    statically insert distractor utterances into a corpus file
    train      run one experiment spec (train + eval, frozen run directory)
    eval       score a checkpoint or a predictions file against a corpus
    compare    relative JGA gains between two report files
    sweep      train/eval one run per perturbation grid cell, emit a CSV

All configs can come from JSON files via --config / --spec; the environment
variable DSTLAB_SEED overrides the seed everywhere. Every run directory
gets a frozen copy of its spec and the content hashes of its inputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import DstLabError
from .corpus import (
    Corpus,
    auxiliary_corpus,
    corpus_hash,
    default_schema,
    generate_synthetic,
    ingest_multiwoz,
    write_corpus,
    SynthConfig,
    synth_config_from_json,
)
from .dst_model import HIERARCHICAL, STATUS_MODES, write_predictions, load_predictions
from .evaluation import (
    compare_reports,
    evaluate,
    evaluate_model,
    load_report,
    save_report,
)
from .perturbation import (
    POSITION_POLICIES,
    SOURCES,
    PerturbationConfig,
    perturb_batch,
    perturbation_config_from_json,
)
from .schema import Schema, load_schema, save_schema
from .seeding import substream, substream_seed
from .training import TrainConfig, load_checkpoint, train, train_config_from_json


def resolve_seed(default: int) -> int:
    env = os.environ.get("DSTLAB_SEED", "").strip()
    return int(env) if env else default


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _write_json(path: str | Path, doc) -> None:
    Path(path).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# experiment spec


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "experiment"
    out_dir: str = "runs/experiment"
    schema_path: str | None = None  # default 4-domain schema when absent
    train_corpus: str | None = None  # dialogue-JSON path; synthetic when absent
    eval_corpus: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval_dialogues: int = 40
    train: TrainConfig = field(default_factory=TrainConfig)
    aux_source: str = "synthetic"  # "synthetic" | path | "none"
    aux_size: int = 400
    overwrite: bool = False

    def to_json(self) -> dict:
        doc = dict(self.__dict__)
        doc["synth"] = self.synth.to_json()
        doc["train"] = self.train.to_json()
        return doc


def experiment_spec_from_json(doc: dict) -> ExperimentSpec:
    doc = dict(doc)
    if doc.get("synth") is not None:
        doc["synth"] = synth_config_from_json(doc["synth"])
    if doc.get("train") is not None:
        doc["train"] = train_config_from_json(doc["train"])
    return ExperimentSpec(**doc)


def _load_spec(args) -> ExperimentSpec:
    spec = experiment_spec_from_json(_read_json(args.spec))
    if getattr(args, "out", None):
        spec = replace(spec, out_dir=args.out)
    if getattr(args, "overwrite", False):
        spec = replace(spec, overwrite=True)
    seed = resolve_seed(spec.train.seed)
    if seed != spec.train.seed:
        spec = replace(spec, train=train_config_from_json(
            {**spec.train.to_json(), "seed": seed}))
    return spec


def _spec_schema(spec: ExperimentSpec) -> Schema:
    return load_schema(spec.schema_path) if spec.schema_path else default_schema()


def _spec_corpora(spec: ExperimentSpec) -> tuple[Corpus, Corpus]:
    schema = _spec_schema(spec)
    root = spec.train.seed
    if spec.train_corpus:
        train_c = ingest_multiwoz(spec.train_corpus, schema, split="train")
    else:
        train_c = generate_synthetic(
            replace(spec.synth, id_prefix="train"),
            substream_seed(root, "corpus"), schema=schema, split="train")
    if spec.eval_corpus:
        eval_c = ingest_multiwoz(spec.eval_corpus, schema, split="test")
    else:
        eval_c = generate_synthetic(
            replace(spec.synth, num_dialogues=spec.eval_dialogues, id_prefix="test"),
            substream_seed(root, "corpus"), schema=schema, split="test")
    return train_c, eval_c


def run_experiment(spec: ExperimentSpec) -> Path:
    """Train per the spec and evaluate on the eval split; returns the run
    directory (spec copy, input hashes, metrics, checkpoints, report)."""
    out = Path(spec.out_dir)
    if out.exists() and any(out.iterdir()) and not spec.overwrite:
        raise DstLabError(f"run directory {out} already exists (use overwrite)")
    out.mkdir(parents=True, exist_ok=True)

    train_c, eval_c = _spec_corpora(spec)
    cfg = spec.train
    needs_aux = cfg.mlm_mode == "target_plus_auxiliary" or (
        cfg.perturbation is not None and cfg.perturbation.source == "auxiliary"
    )
    aux = None
    if spec.aux_source != "none" and (needs_aux or spec.aux_source != "synthetic"):
        aux = auxiliary_corpus(
            spec.aux_source,
            seed=substream_seed(cfg.seed, "aux"),
            size=spec.aux_size,
            exclude=train_c.all_utterances(),
        )
    elif needs_aux:
        raise DstLabError("spec needs an auxiliary pool but aux_source is 'none'")

    _write_json(out / "spec.json", spec.to_json())
    _write_json(out / "inputs.json", {
        "seed": cfg.seed,
        "schema_hash": hashlib.sha256(
            json.dumps(train_c.schema.to_json(), sort_keys=True).encode()).hexdigest(),
        "train_corpus_hash": corpus_hash(train_c),
        "eval_corpus_hash": corpus_hash(eval_c),
        "aux_pool_hash": hashlib.sha256(
            "\n".join(aux or ()).encode()).hexdigest(),
        "train_corpus_path": spec.train_corpus,
        "eval_corpus_path": spec.eval_corpus,
    })

    model, _metrics = train(train_c, cfg, aux_pool=aux, run_dir=out)
    report, preds = evaluate_model(model, eval_c, mode=cfg.status_mode)
    save_report(report, out / "eval_report.json")
    write_predictions(out / "predictions.jsonl", preds)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    config = synth_config_from_json(_read_json(args.config)) if args.config else SynthConfig()
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schema = load_schema(args.schema) if args.schema else default_schema()
    save_schema(schema, out / "schema.json")

    splits = {}
    for part in args.splits.split(","):
        name, _, size = part.partition(":")
        if not size.isdigit():
            raise DstLabError(f"bad --splits fragment {part!r} (want name:count)")
        splits[name.strip()] = int(size)

    manifest = {"seed": seed, "config": config.to_json(), "splits": {}}
    for name, size in splits.items():
        corpus = generate_synthetic(
            replace(config, num_dialogues=size, id_prefix=name),
            seed, schema=schema, split=name)
        path = out / f"{name}.json"
        write_corpus(corpus, path)
        manifest["splits"][name] = {
            "path": path.name,
            "dialogues": size,
            "file_sha256": file_sha256(path),
            "corpus_hash": corpus_hash(corpus),
        }
        print(f"wrote {path} ({size} dialogues)")
    _write_json(out / "manifest.json", manifest)
    return 0


def cmd_perturb(args) -> int:
    schema = load_schema(args.schema)
    corpus = ingest_multiwoz(args.corpus, schema)
    if args.config:
        cfg = perturbation_config_from_json(_read_json(args.config))
    else:
        cfg = PerturbationConfig(
            probability=args.probability,
            num_insertions=args.num_insertions,
            source=args.source,
            position_policy=args.position_policy,
        )
    seed = resolve_seed(args.seed if args.seed is not None else cfg.seed)
    rng = substream(seed, "perturb")

    pool: list[str] = []
    vocab = None
    if cfg.source == "auxiliary":
        pool = auxiliary_corpus(args.aux or "synthetic", seed=substream_seed(seed, "aux"),
                                exclude=corpus.all_utterances())
    elif cfg.source == "target":
        pool = corpus.all_utterances()
    else:
        vocab = sorted({w for u in corpus.all_utterances() for w in u.split()})

    perturbed = Corpus(
        schema=schema,
        dialogues=tuple(perturb_batch(corpus.dialogues, cfg, pool, rng, vocab=vocab)),
        split=corpus.split,
    )
    write_corpus(perturbed, args.out)
    _write_json(str(args.out) + ".manifest.json", {
        "seed": seed,
        "config": cfg.to_json(),
        "input_hash": corpus_hash(corpus),
        "output_hash": corpus_hash(perturbed),
        "inserted_turns": sum(t.inserted for d in perturbed.dialogues for t in d.turns),
    })
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    spec = _load_spec(args)
    out = run_experiment(spec)
    report = load_report(out / "eval_report.json")
    print(f"run {spec.name}: dir={out} jga_all={report.jga_all:.4f} "
          f"oracle_jga={report.oracle_jga:.4f}")
    return 0


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.predictions):
        raise DstLabError("pass exactly one of --checkpoint / --predictions")
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        corpus = ingest_multiwoz(args.corpus, model.schema, split="test")
        report, preds = evaluate_model(
            model, corpus, mode=args.mode, with_oracle=not args.no_oracle)
        if args.predictions_out:
            write_predictions(args.predictions_out, preds)
    else:
        if not args.schema:
            raise DstLabError("--predictions needs --schema")
        corpus = ingest_multiwoz(args.corpus, load_schema(args.schema), split="test")
        report = evaluate(load_predictions(args.predictions), corpus)
    if args.out:
        save_report(report, args.out)

    def fmt(v):
        return "n/a" if v is None else f"{v}"

    print(f"jga_all={fmt(report.jga_all)} jga_short={fmt(report.jga_short)} "
          f"jga_long={fmt(report.jga_long)} oracle_jga={fmt(report.oracle_jga)}")
    print(f"buckets: short<={report.short_max_utts} long>={report.long_min_utts} "
          f"turns={report.num_turns}")
    return 0


def cmd_compare(args) -> int:
    before = load_report(args.before)
    after = load_report(args.after)
    comparison = compare_reports(before, after)
    print("metric,before,after,relative_gain")
    for metric, cell in comparison.gains.items():
        gain = cell["relative_gain"]
        print(f"{metric},{cell['before']},{cell['after']},"
              f"{'' if gain is None else format(gain, '.6f')}")
    if args.out:
        _write_json(args.out, comparison.to_json())
    if args.csv:
        Path(args.csv).write_text(comparison.to_csv(), encoding="utf-8")
    return 0


DEFAULT_GRID = {
    "sources": list(SOURCES),
    "position_policies": list(POSITION_POLICIES),
    "probabilities": [0.2, 0.4, 0.6],
    "num_insertions": [2, 3, 4],
}


def sweep_cells(grid: dict) -> list[dict]:
    return [
        {"source": s, "position_policy": pos, "probability": p, "num_insertions": n}
        for s in grid["sources"]
        for pos in grid["position_policies"]
        for p in grid["probabilities"]
        for n in grid["num_insertions"]
    ]


def _run_cell(spec: ExperimentSpec, cell: dict, out_root: Path) -> dict:
    tag = (f"{cell['source']}-{cell['position_policy']}"
           f"-p{cell['probability']}-n{cell['num_insertions']}")
    row = dict(cell)
    try:
        pert = PerturbationConfig(
            probability=cell["probability"],
            num_insertions=cell["num_insertions"],
            source=cell["source"],
            position_policy=cell["position_policy"],
        )
        cell_spec = replace(
            spec,
            name=f"{spec.name}/{tag}",
            out_dir=str(out_root / "cells" / tag),
            train=train_config_from_json(
                {**spec.train.to_json(), "perturbation": pert.to_json()}),
        )
        run_dir = run_experiment(cell_spec)
        report = load_report(run_dir / "eval_report.json")
        row.update(status="ok", jga_all=report.jga_all, jga_short=report.jga_short,
                   jga_long=report.jga_long, error="")
    except Exception as exc:  # keep sweeping past failed cells
        row.update(status="failed", jga_all="", jga_short="", jga_long="",
                   error=f"{type(exc).__name__}: {exc}")
    return row


def cmd_sweep(args) -> int:
    spec = _load_spec(args)
    grid = _read_json(args.grid) if args.grid else DEFAULT_GRID
    for key in DEFAULT_GRID:
        if key not in grid:
            raise DstLabError(f"grid is missing {key!r}")
    out_root = Path(args.out or spec.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)

    rows = []
    for i, cell in enumerate(sweep_cells(grid)):
        rows.append(_run_cell(spec, cell, out_root))
        print(f"[{i + 1}] {rows[-1]['source']} {rows[-1]['position_policy']} "
              f"p={rows[-1]['probability']} n={rows[-1]['num_insertions']} "
              f"-> {rows[-1]['status']} {rows[-1]['jga_all']}")

    fields = ["source", "position_policy", "probability", "num_insertions",
              "status", "jga_all", "jga_short", "jga_long", "error"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (out_root / "sweep.csv").write_text(buf.getvalue(), encoding="utf-8")
    _write_json(out_root / "sweep.json", {"grid": grid, "cells": rows})
    print(f"wrote {out_root / 'sweep.csv'} ({len(rows)} cells)")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dstlab",
        description="Desk-scale dialogue state tracking experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic corpora")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="SynthConfig JSON")
    p.add_argument("--schema", help="schema JSON (default: built-in)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--splits", default="train:200,dev:40,test:40")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("perturb", help="insert distractor utterances")
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="PerturbationConfig JSON")
    p.add_argument("--probability", type=float, default=0.2)
    p.add_argument("--num-insertions", type=int, default=2)
    p.add_argument("--source", choices=SOURCES, default="auxiliary")
    p.add_argument("--position-policy", choices=POSITION_POLICIES,
                   default="random_boundary")
    p.add_argument("--aux", help="newline-delimited auxiliary utterances")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("train", help="run one experiment spec")
    p.add_argument("--spec", required=True, help="ExperimentSpec JSON")
    p.add_argument("--out", help="override spec.out_dir")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or predictions file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions")
    p.add_argument("--schema")
    p.add_argument("--mode", choices=STATUS_MODES, default=HIERARCHICAL)
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--predictions-out")
    p.add_argument("--no-oracle", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="relative gains between two reports")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--out", help="comparison JSON path")
    p.add_argument("--csv", help="plot-data CSV path")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="perturbation grid sweep")
    p.add_argument("--spec", required=True, help="base ExperimentSpec JSON")
    p.add_argument("--out", help="sweep output directory")
    p.add_argument("--grid", help="grid JSON (sources/position_policies/"
                                  "probabilities/num_insertions)")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DstLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
