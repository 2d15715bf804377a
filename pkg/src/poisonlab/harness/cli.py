"""Command-line entry point: poisonlab <verb> --config <path> [--seed N]."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from ..core import Rng, save_dataset
from .config import load_config
from .experiments import (corpus_for, emit_report, make_backend, make_logo,
                          personalize, run_defense, run_memorization,
                          run_ratio_sweep, run_secondary_poisoning, run_stealth,
                          run_trigger_experiment)
from .ledger import Ledger


def _root(args) -> str:
    return args.home or os.environ.get("POISONLAB_HOME", "poisonlab_runs")


def _load(args):
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="poisonlab",
                                     description="Desk-scale logo-poisoning laboratory")
    parser.add_argument("--home", default=None,
                        help="experiment root (default: $POISONLAB_HOME)")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("synth", "personalize", "poison", "train", "eval-lir",
                 "eval-fae", "eval-stealth", "defend", "secondary", "report"):
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        if verb == "synth":
            p.add_argument("--out", required=True, help="manifest path to write")
        if verb == "eval-lir":
            p.add_argument("--variant", default="direct",
                           choices=["direct", "poison", "clean"])
        if verb == "poison":
            p.add_argument("--ratios", default=None,
                           help="comma-separated ratios for a sweep")
        if verb == "secondary":
            p.add_argument("--n-generated", type=int, default=64)
        if verb == "report":
            p.add_argument("--out-dir", default=None)
    args = parser.parse_args(argv)
    root = _root(args)
    config = _load(args)
    ledger = Ledger(os.path.join(root, "ledger"))

    if args.verb == "synth":
        corpus = corpus_for(config, Rng(config.seed, config.experiment_id))
        save_dataset(corpus, args.out)
        print(f"wrote {len(corpus)} samples to {args.out}")
    elif args.verb == "personalize":
        backend = make_backend(config, root)
        corpus = corpus_for(config, Rng(config.seed, config.experiment_id))
        handle = personalize(backend, corpus, make_logo(config),
                             Rng(config.seed, config.experiment_id),
                             config.train.personalize_epochs)
        print(f"personalized model: {handle.weights_ref}")
    elif args.verb in ("train", "eval-lir"):
        variant = getattr(args, "variant", "direct")
        report = run_memorization(config, ledger, root, variant=variant)
        print(json.dumps({"lir": report.lir}))
    elif args.verb == "poison":
        ratios = [float(r) for r in args.ratios.split(",")] if args.ratios \
            else [config.plan.ratio]
        reports = run_ratio_sweep(config, ledger, root, ratios)
        print(json.dumps([{"lir": r.lir, "fae": r.fae} for r in reports]))
    elif args.verb == "eval-fae":
        reports = run_ratio_sweep(config, ledger, root, [config.plan.ratio],
                                  track_fae=True)
        print(json.dumps({"fae": reports[0].fae}))
    elif args.verb == "eval-stealth":
        rng = Rng(config.seed, config.experiment_id)
        backend = make_backend(config, root)
        logo = make_logo(config)
        corpus = corpus_for(config, rng)
        from ..poisoner import poison_dataset
        from .experiments import make_detector
        model = personalize(backend, corpus, logo, rng,
                            config.train.personalize_epochs)
        proposer, embedder = make_detector(logo)
        poisoned, _ = poison_dataset(backend, model, corpus, logo, config.plan,
                                     config.constraints, rng.child("poison"),
                                     proposer, embedder)
        rows = run_stealth(config, ledger, corpus, poisoned.dataset,
                           set(poisoned.poisoned_ids))
        print(json.dumps({"n": len(rows)}))
    elif args.verb == "defend":
        rng = Rng(config.seed, config.experiment_id)
        corpus = corpus_for(config, rng)
        out = run_defense(config, ledger, corpus, set())
        print(json.dumps(out))
    elif args.verb == "secondary":
        rng = Rng(config.seed, config.experiment_id)
        backend = make_backend(config, root)
        logo = make_logo(config)
        corpus = corpus_for(config, rng)
        from .experiments import direct_composites
        train_set = direct_composites(corpus, logo, rng, ratio=config.plan.ratio)
        primary = backend.train(train_set, epochs=config.train.epochs,
                                rng=rng.child("train"))
        lp, ls = run_secondary_poisoning(config, ledger, root, primary,
                                         n_generated=args.n_generated)
        print(json.dumps({"lir_primary": lp, "lir_secondary": ls}))
    elif args.verb == "report":
        out_dir = args.out_dir or os.path.join(root, "reports")
        written = emit_report(ledger, config.experiment_id, out_dir)
        print("\n".join(written))
    return 0


if __name__ == "__main__":
    sys.exit(main())
