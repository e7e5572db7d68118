"""Command-line front end.

Five subcommands cover the whole workflow: `gen-data` materializes a synthetic
benchmark from a JSON spec, `mine` writes the counterfactual sidecar, `train`
fits a model and reports validation retrieval, `eval` scores a checkpoint on
any split, and `grad-check` runs the finite-difference verification suite.

Every command prints a single JSON document to stdout so runs are easy to
script against; reports additionally land as CSV and PNG files next to the
JSON when an output directory is involved.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import generate_synthetic, load_dataset, load_spec
from .evaluation import DEFAULT_KS, Metrics, evaluate, evaluate_checkpoint
from .gradsuite import MODULES, run_suite
from .mining import write_sidecar
from .model import init_model
from .report import write_report
from .training import (
    load_train_config,
    mine_inline,
    train,
    validate_compatibility,
)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _cmd_gen_data(args) -> int:
    spec = load_spec(args.spec)
    summary = generate_synthetic(spec, args.out)
    _emit(summary)
    return 0


def _cmd_mine(args) -> int:
    dataset = load_dataset(args.data)
    config = load_train_config(args.config)
    if config.mining_encoder != "frozen":
        raise ValueError("precomputing a sidecar only makes sense with "
                         "mining_encoder='frozen'")
    validate_compatibility(config.encoder, dataset)
    # same initialization stream as train(), so a sidecar produced here is
    # bit-identical to what inline mining would have used
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0)))
    params = init_model(rng, config.encoder, n_p=config.n_p)
    sets = mine_inline(params, dataset, config.miner)
    out = Path(args.out) if args.out else Path(args.data) / "counterfactuals.jsonl"
    write_sidecar(out, sets.values())
    _emit({
        "sidecar": str(out),
        "queries": len(sets),
        "pcs_truncated": sum(1 for s in sets.values() if s.pcs_truncated),
    })
    return 0


def _cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    config = load_train_config(args.config)
    sidecar = Path(args.sidecar) if args.sidecar else Path(args.data) / "counterfactuals.jsonl"
    result = train(config, dataset, args.out, sidecar_path=sidecar)

    val = evaluate(result.params, dataset, "val")
    metrics = Metrics(recall_at_k=val.recall_at_k,
                      step_losses=result.step_losses,
                      epoch_losses=result.epoch_losses)
    written = write_report(args.out, metrics, lr_curve=result.lr_curve)
    _emit({
        "checkpoint": str(result.final_checkpoint),
        "epochs": config.max_epochs,
        "steps": len(result.step_losses),
        "final_loss": result.step_losses[-1],
        "val_recall_at_k": {str(k): v for k, v in sorted(val.recall_at_k.items())},
        "report_files": [str(p) for p in written],
    })
    return 0


def _cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    metrics = evaluate_checkpoint(args.ckpt, dataset, args.split, ks=DEFAULT_KS)
    payload = {
        "checkpoint": str(args.ckpt),
        "split": args.split,
        "recall_at_k": {str(k): v for k, v in sorted(metrics.recall_at_k.items())},
    }
    if args.out:
        payload["report_files"] = [str(p) for p in write_report(args.out, metrics)]
    _emit(payload)
    return 0


def _cmd_grad_check(args) -> int:
    results, elapsed = run_suite(module=args.module, seeds=args.seeds)
    _emit({
        "passed": all(r.passed for r in results),
        "elapsed_seconds": round(elapsed, 3),
        "checks": [{"name": r.name, "worst_error": r.worst_error,
                    "tolerance": r.tolerance, "passed": r.passed}
                   for r in results],
    })
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cirlite")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic retrieval benchmark")
    p.add_argument("--spec", required=True, help="JSON benchmark description")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser("mine", help="write the counterfactual sidecar for a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--out", help="sidecar path (default: DATA/counterfactuals.jsonl)")
    p.set_defaults(handler=_cmd_mine)

    p = sub.add_parser("train", help="train a model and report validation retrieval")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--out", required=True, help="checkpoint and report directory")
    p.add_argument("--sidecar", help="counterfactual sidecar "
                                     "(default: DATA/counterfactuals.jsonl)")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", required=True, help="train, val, or test")
    p.add_argument("--out", help="also write report files here")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--module", choices=MODULES, help="run one tier instead of all")
    p.add_argument("--seeds", type=int, default=20, help="instances per check")
    p.set_defaults(handler=_cmd_grad_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
