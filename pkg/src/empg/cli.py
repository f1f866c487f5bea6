"""Command-line entry point: ``empg {train,eval,gradcheck,compare,oracle}``.

Exit codes: 0 success, 2 config error, 3 numerical abort, 4 verification
failure, 5 capacity error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CapacityError, ConfigError, InvalidInputError, NumericalError
from .oracle import (IDENTITIES, exact_estimator_expectation, exact_kl, exact_objective,
                     exact_policy_gradient, gradcheck)
from .policy import PolicyParams, load_params, save_params
from .tasks import registry_hash
from .trainer import (TrainConfig, evaluate, final_score, initial_params, load_config, train,
                      write_curves_csv, write_metrics_jsonl, write_timing_jsonl, _stream, _EVAL)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VERIFY, EXIT_CAPACITY = 0, 2, 3, 4, 5


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _config(args, extra: list[str] = ()) -> TrainConfig:
    overrides = list(args.override or []) + list(extra)
    if args.seed is not None:
        overrides.append(f"seed = {args.seed}")
    return load_config(args.config, overrides)


def fresh_run_dir(root: Path, stem: str = "run") -> Path:
    root.mkdir(parents=True, exist_ok=True)
    i = 0
    while (root / f"{stem}-{i:03d}").exists():
        i += 1
    path = root / f"{stem}-{i:03d}"
    path.mkdir()
    return path


def write_manifest(run_dir: Path, config: TrainConfig, overrides: list[str], **timestamps) -> dict:
    manifest = {
        "config": config.to_dict(),
        "config_text": config.to_text(),
        "overrides": list(overrides),
        "seed": config.seed,
        "code_version": __version__,
        "task_registry_hash": registry_hash(),
        "output_directory": str(run_dir),
        "timestamps": timestamps,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def config_from_manifest(path: str | Path) -> TrainConfig:
    data = json.loads(Path(path).read_text())
    return TrainConfig(**data["config"])


def run_training(config: TrainConfig, run_dir: Path, overrides: list[str] = ()) -> dict:
    """Train into ``run_dir``: manifest first, then metrics, curves and final checkpoint."""
    created = _now()
    write_manifest(run_dir, config, list(overrides), created=created)
    metrics_path = run_dir / "metrics.jsonl"
    fh = open(metrics_path, "w")

    def sink(rec):
        fh.write(json.dumps(rec.to_dict()) + "\n")
        fh.flush()

    try:
        params, records = train(config, checkpoint_dir=run_dir, on_record=sink)
    finally:
        fh.close()
    write_metrics_jsonl(records, metrics_path)
    write_timing_jsonl(records, run_dir / "timing.jsonl")
    write_curves_csv(records, run_dir / "curves.csv")
    save_params(params, run_dir / "checkpoint_final.json")
    write_manifest(run_dir, config, list(overrides), created=created, finished=_now())
    return {"run_dir": str(run_dir), "final_score": final_score(records), "records": records}


# subcommands -------------------------------------------------------------------------

def cmd_train(args) -> int:
    config = _config(args)
    run_dir = fresh_run_dir(Path(args.out_dir))
    out = run_training(config, run_dir, args.override or [])
    print(json.dumps({"run_dir": out["run_dir"], "final_score": out["final_score"]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _config(args)
    task = config.make_task()
    params = load_params(args.checkpoint) if args.checkpoint else initial_params(config, task)
    rate, length = evaluate(params, task, config.eval_size, _stream(config.seed, _EVAL))
    print(json.dumps({"success_rate": rate, "mean_length": length, "eval_size": config.eval_size}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck(seed=0 if args.seed is None else args.seed, trials=args.trials,
                       wrong_sign=args.inject_wrong_sign)
    print(json.dumps(report, indent=2))
    if report["vacuous"]:
        print("gradcheck: no trials run (vacuous pass)", file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_compare(args) -> int:
    if len(args.estimators) < 2:
        raise ConfigError("compare needs at least two estimators")
    root = fresh_run_dir(Path(args.out_dir), "compare")
    rows, curves = [], []
    for e_pos, est in enumerate(args.estimators):
        finals, failures = [], []
        for seed in args.seeds:
            cell = [f"estimator_kind = {est}", f"seed = {seed}"]
            config = load_config(args.config, list(args.override or []) + cell)
            cell_dir = root / f"{e_pos}-{est}-seed{seed}"
            cell_dir.mkdir()
            try:
                out = run_training(config, cell_dir, list(args.override or []) + cell)
            except Exception as exc:  # keep the other cells
                (cell_dir / "FAILED").write_text(traceback.format_exc())
                failures.append({"seed": seed, "error": repr(exc)})
                continue
            finals.append(out["final_score"])
            for r in out["records"]:
                if r.eval_success_rate is not None:
                    curves.append([est, seed, r.iteration, r.eval_success_rate, r.mean_response_length,
                                   r.eval_mean_length])
        rows.append({
            "estimator": est,
            "runs": len(finals),
            "failed": len(failures),
            "mean_final_success": float(np.mean(finals)) if finals else None,
            "std_final_success": float(np.std(finals)) if finals else None,
            "finals": finals,
            "failures": failures,
        })
    with open(root / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["estimator", "runs", "failed", "mean_final_success", "std_final_success"])
        for r in rows:
            w.writerow([r["estimator"], r["runs"], r["failed"], r["mean_final_success"], r["std_final_success"]])
    with open(root / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["estimator", "seed", "iteration", "eval_success_rate", "mean_response_length",
                    "eval_mean_length"])
        w.writerows(curves)
    (root / "comparison.json").write_text(json.dumps(rows, indent=2))
    for r in rows:
        m, s = r["mean_final_success"], r["std_final_success"]
        txt = "n/a" if m is None else f"{m:.3f} +- {s:.3f}"
        print(f"{r['estimator']:<20} {txt}  runs={r['runs']} failed={r['failed']}")
    print(json.dumps({"output_directory": str(root), "rows": rows}))
    return EXIT_OK if all(r["failed"] == 0 for r in rows) else EXIT_NUMERICAL


def _oracle_policy(choice: str | None, config: TrainConfig, task, rng_seed: int) -> PolicyParams:
    if choice is None or choice == "init":
        return initial_params(config, task)
    if choice == "uniform":
        return PolicyParams.zeros(task.vocab_size, task.context_order, task.begin_token)
    if choice.startswith("random"):
        _, _, s = choice.partition(":")
        rng = np.random.default_rng(int(s) if s else rng_seed)
        return PolicyParams.gaussian(task.vocab_size, task.context_order, task.begin_token, 1.0, rng)
    return load_params(choice)


def cmd_oracle(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.what == "identity":
        if args.name not in IDENTITIES:
            raise ConfigError(f"unknown identity {args.name!r}; known: {sorted(IDENTITIES)}")
        report = IDENTITIES[args.name](np.random.default_rng(seed))
        print(json.dumps(report))
        return EXIT_OK if report["passed"] else EXIT_VERIFY
    config = _config(args)
    task = config.make_task()
    params = _oracle_policy(args.policy, config, task, seed)
    if args.what == "objective":
        out = {"objective": exact_objective(params, task)}
    elif args.what == "gradient":
        g = exact_policy_gradient(params, task)
        out = {"objective": exact_objective(params, task), "gradient_norm": float(np.linalg.norm(g))}
    elif args.what == "kl":
        ref = _oracle_policy(args.reference or "init", config, task, seed + 1)
        out = {"kl": exact_kl(params, ref, task)}
    else:
        star = _oracle_policy(args.policy_star or args.policy, config, task, seed + 1)
        g = exact_estimator_expectation(args.kind, params, star, task, shaping=args.shaping,
                                        baseline_mode=args.baseline_mode, batch_size=args.batch_size,
                                        clip_eps=config.clip_eps)
        gj = exact_policy_gradient(params, task)
        out = {"estimator": args.kind, "expectation_norm": float(np.linalg.norm(g)),
               "bias_norm": float(np.linalg.norm(g - gj)), "max_abs_bias": float(np.abs(g - gj).max())}
    print(json.dumps(out))
    return EXIT_OK


# parser ------------------------------------------------------------------------------

def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies use SUPPRESS so they don't clobber flags given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="key = value config file")
    common.add_argument("--seed", type=int, default=d(None))
    common.add_argument("--out-dir", default=d("runs"))
    common.add_argument("--override", action="append", default=d(None), metavar="KEY=VALUE",
                        help="repeatable")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(True)
    p = argparse.ArgumentParser(prog="empg", description="EM policy gradient laboratory", parents=[_common(False)])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", parents=[common])
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", parents=[common])
    sp.add_argument("--checkpoint")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", parents=[common])
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--inject-wrong-sign", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("compare", parents=[common])
    sp.add_argument("--estimators", nargs="+", default=["empg", "clipped"])
    sp.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("oracle", parents=[common])
    sp.add_argument("what", choices=["objective", "gradient", "estimator", "kl", "identity"])
    sp.add_argument("name", nargs="?", help="identity name")
    sp.add_argument("--policy", help="init | uniform | random[:seed] | checkpoint path")
    sp.add_argument("--policy-star")
    sp.add_argument("--reference")
    sp.add_argument("--kind", default="empg")
    sp.add_argument("--shaping", default="raw")
    sp.add_argument("--baseline-mode", default="none")
    sp.add_argument("--batch-size", type=int, default=1)
    sp.set_defaults(fn=cmd_oracle)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except InvalidInputError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
