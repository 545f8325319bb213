"""Command-line front end: ``generate``, ``run``, ``batch`` and ``eval``.

Config files are JSON objects; every key is optional::

    {
      "prior": {"mu0": 0.0, "kappa0": 0.001, "psi0": 1.0, "nu0": 4.0},
      "alpha": 5.0,
      "n_workers": 1,
      "minibatch_size": 50,
      "k_max": 50,
      "tol": 1e-6,
      "max_iters": 500,
      "seed": 0,
      "component_id_enabled": true,
      "eval_every": 0,
      "backend": "auto",
      "truncation": 200
    }

Scalar ``mu0`` / ``psi0`` are broadcast to ``mu0 * ones(d)`` and ``psi0 * I``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .central import CentralPosterior
from .data import DatasetFormatError, generate, read_dataset, write_dataset, write_labels, write_truth
from .engine import RunConfig, batch_vi, held_out_ll, run
from .expfam import ConventionalNiw, InvalidParameterError

DEFAULTS = {
    "prior": {"mu0": 0.0, "kappa0": 1e-3, "psi0": 1.0, "nu0": 4.0},
    "alpha": 5.0,
    "n_workers": 1,
    "minibatch_size": 50,
    "k_max": 50,
    "tol": 1e-6,
    "max_iters": 500,
    "seed": 0,
    "component_id_enabled": True,
    "eval_every": 0,
    "backend": "auto",
    "truncation": 200,
}


class CliError(Exception):
    pass


def load_config(path) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(user, dict):
        raise CliError("config must be a JSON object")
    unknown = set(user) - set(DEFAULTS)
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    prior = dict(cfg["prior"])
    prior.update(user.pop("prior", {}))
    cfg.update(user)
    cfg["prior"] = prior
    return cfg


def build_prior(spec: dict, d: int) -> ConventionalNiw:
    mu0 = np.asarray(spec["mu0"], dtype=float)
    psi0 = np.asarray(spec["psi0"], dtype=float)
    mu0 = np.full(d, float(mu0)) if mu0.ndim == 0 else mu0
    psi0 = float(psi0) * np.eye(d) if psi0.ndim == 0 else psi0
    prior = ConventionalNiw(mu0, spec["kappa0"], psi0, spec["nu0"])
    if prior.dim != d:
        raise CliError(f"prior dimension {prior.dim} does not match data dimension {d}")
    prior.validate()
    return prior


def run_config(cfg: dict, d: int) -> RunConfig:
    keys = ("n_workers", "minibatch_size", "alpha", "k_max", "tol", "max_iters", "seed",
            "component_id_enabled", "eval_every", "backend")
    rc = RunConfig(prior=build_prior(cfg["prior"], d), **{k: cfg[k] for k in keys})
    rc.validate()
    return rc


# ---------------------------------------------------------------------------
# verbs

def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    prior = build_prior(cfg["prior"], args.d)
    train, test = generate(args.n, args.d, args.clusters, prior, seed=args.seed, n_test=args.n_test)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out / "train.csv", train.x)
    write_labels(out / "train_labels.csv", train.labels)
    write_truth(out / "truth.json", train)
    if test is not None:
        write_dataset(out / "test.csv", test.x)
        write_labels(out / "test_labels.csv", test.labels)
    print(f"wrote {args.n} training rows to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    for key in ("n_workers", "seed", "eval_every", "backend"):
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    if args.no_component_id:
        cfg["component_id_enabled"] = False
    train = read_dataset(args.train)
    test = read_dataset(args.test)
    if train.shape[1] != test.shape[1]:
        raise CliError("train and test dimensions differ")
    rc = run_config(cfg, train.shape[1])
    central, trace = run(rc, train, test)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace.write_jsonl(out / "trace.jsonl")
    trace.write_summary_csv(out / "summary.csv")
    central.save(out / "posterior.json")
    print(f"merges={trace.n_merges} K={trace.final_k} matchings={trace.matchings_solved} "
          f"test_ll={trace.final_held_out_ll:.6f} seconds={trace.total_seconds:.3f}")
    return 0


def cmd_batch(args) -> int:
    cfg = load_config(args.config)
    data = read_dataset(args.train)
    prior = build_prior(cfg["prior"], data.shape[1])
    truncation = args.truncation if args.truncation is not None else cfg["truncation"]
    seed = args.seed if args.seed is not None else cfg["seed"]
    central, mb = batch_vi(data, prior, cfg["alpha"], truncation=truncation, tol=cfg["tol"],
                           max_iters=cfg["max_iters"], seed=seed)
    central.save(args.out)
    print(f"K={central.k} final_elbo={mb.elbo_trace[-1]:.6f}")
    return 0


def cmd_eval(args) -> int:
    try:
        central = CentralPosterior.load(args.posterior)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read posterior {args.posterior}: {exc}") from exc
    test = read_dataset(args.test)
    if test.shape[1] != central.dim:
        raise CliError(f"test dimension {test.shape[1]} does not match posterior dimension {central.dim}")
    print(f"{held_out_ll(central, test):.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamdp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample a synthetic Gaussian mixture dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--d", type=int, default=2)
    g.add_argument("--clusters", type=int, required=True)
    g.add_argument("--n-test", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="JSON config; only the prior is used")
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="streaming asynchronous inference")
    r.add_argument("--config")
    r.add_argument("--train", required=True)
    r.add_argument("--test", required=True)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--workers", dest="n_workers", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--eval-every", type=int)
    r.add_argument("--backend", choices=("thread", "process", "auto"))
    r.add_argument("--no-component-id", action="store_true",
                   help="merge with the index-order map instead of solving for it")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("batch", help="batch variational inference baseline")
    b.add_argument("--config")
    b.add_argument("--train", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--truncation", type=int)
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_batch)

    e = sub.add_parser("eval", help="mean held-out log-likelihood of a saved posterior")
    e.add_argument("--posterior", required=True)
    e.add_argument("--test", required=True)
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, DatasetFormatError, InvalidParameterError, ValueError, OSError) as exc:
        print(f"streamdp {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
