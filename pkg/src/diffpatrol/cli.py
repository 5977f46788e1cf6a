"""Command-line entry points.

Subcommands: ``generate`` (synthetic dataset), ``train`` (denoiser),
``solve`` (one method on one instance), ``evaluate`` (regret of a saved
solution), ``run`` (full experiment). Every failure exits non-zero with the
stage named; the ``DIFFPATROL_OUTPUT_ROOT`` environment variable relocates
relative output paths.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .diffusion import NoiseSchedule, TrainConfig, save_checkpoint, train_denoiser
from .errors import DiffPatrolError
from .harness import (
    AnalyticTestbed,
    evaluate_regret_analytic,
    load_config,
    run_experiment,
    solve_one,
)
from .rngs import derive_rng
from .scenario import DatasetConfig, build_dataset, dataset_digest, load_dataset
from .utility import MixedDefenderStrategy, PatrolStrategy


def _cmd_generate(args: argparse.Namespace) -> int:
    cfg = DatasetConfig.desk(seed=args.seed) if args.desk else DatasetConfig(seed=args.seed)
    if args.n_train is not None:
        cfg = DatasetConfig(
            n_train=args.n_train, n_val=args.n_val, n_test=args.n_test, seed=args.seed
        )
    rng = derive_rng(cfg.seed, "dataset")
    ds = build_dataset(cfg, rng, out_dir=args.out)
    print(f"wrote dataset to {args.out} (digest {dataset_digest(ds)[:16]})")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    ds = load_dataset(args.dataset)
    dataset = [(inst.z, inst.context) for inst in ds.train]
    data = np.stack([z for z, _ in dataset])
    schedule = NoiseSchedule.desk_default(float(data.var()), T=args.steps)
    hyper = TrainConfig(
        learning_rate=args.learning_rate, epochs=args.epochs, batch_size=args.batch_size
    )
    net, losses = train_denoiser(dataset, schedule, hyper, derive_rng(args.seed, "train"))
    save_checkpoint(args.out, net, schedule)
    print(f"trained {args.epochs} epochs; final loss {losses[-1]:.6f}; saved {args.out}")
    return 0


def _cmd_solve(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    testbed = AnalyticTestbed.build(cfg)
    c = testbed.contexts[args.instance]
    rng = derive_rng(args.seed, args.method, args.instance)
    pi = solve_one(
        args.method, testbed.model, c, testbed.schedule, testbed.params, cfg, rng
    )
    payload = {
        "method": args.method,
        "seed": args.seed,
        "instance": args.instance,
        "atoms": [a.x.tolist() for a in pi.atoms],
        "probs": pi.probs.tolist(),
        "budget": cfg.budget,
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=1)
    print(f"solved {args.method} on instance {args.instance}; wrote {args.out}")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    testbed = AnalyticTestbed.build(cfg)
    with open(args.solution) as fh:
        payload = json.load(fh)
    atoms = tuple(
        PatrolStrategy(x=np.asarray(a, dtype=float), budget=payload["budget"])
        for a in payload["atoms"]
    )
    pi = MixedDefenderStrategy(atoms=atoms, probs=np.asarray(payload["probs"]))
    instance = args.instance if args.instance is not None else payload.get("instance", 0)
    result = evaluate_regret_analytic(
        pi, testbed, testbed.contexts[instance], args.gamma_test,
        grid_points=cfg.eval_grid_points,
    )
    print(json.dumps({"instance": instance, "gamma_test": args.gamma_test, **result}))
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    report = run_experiment(args.config)
    for method in sorted(report.average):
        print(
            f"{method}: avg regret {report.average[method]:.4f} "
            f"(worst {report.worst[method]:.4f})"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffpatrol", description="Robust patrol planning experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate the synthetic graph dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--desk", action="store_true", help="small split sizes (480/20/10)")
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-val", type=int, default=200)
    p.add_argument("--n-test", type=int, default=100)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train the denoiser on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=100, help="diffusion step count T")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("solve", help="run one method on one test instance")
    p.add_argument("--config", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instance", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("evaluate", help="evaluate regret of a saved solution")
    p.add_argument("--config", required=True)
    p.add_argument("--solution", required=True)
    p.add_argument("--instance", type=int, default=None)
    p.add_argument("--gamma-test", type=float, default=1.0)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("run", help="run the full experiment from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DiffPatrolError as exc:
        print(f"error in '{args.command}': {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error in '{args.command}': {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
