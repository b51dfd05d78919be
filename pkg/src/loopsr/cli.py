"""Command-line entry point: ``loopsr {pretrain,adapt,eval,theory,ablate}``.

Exit codes: 0 success, 2 configuration error, 3 missing artifact, 4 numerical failure.
"""

from __future__ import annotations

import os

# BLAS thread caps must be in place before numpy is imported.
_THREADS = os.environ.get("LSR_THREADS", "")
if _THREADS.isdigit() and int(_THREADS) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _THREADS

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from loopsr.errors import ConfigError, MissingArtifactError, UsageError  # noqa: E402
from loopsr.numgrad import NumericalError  # noqa: E402
from loopsr.ppo import DivergenceError  # noqa: E402

log = logging.getLogger("loopsr")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="loopsr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", required=True, help="run directory")

    sp = sub.add_parser("pretrain", help="pretrain policy, codec and reference store")
    common(sp, config_required=True)

    for name, text in (("adapt", "run the adaptation loops on a test environment"),
                       ("eval", "evaluate run checkpoints on a test environment")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.add_argument("--loops", type=int)
        sp.add_argument("--test-terrain")
        sp.add_argument("--test-difficulty", type=float)

    sp = sub.add_parser("theory", help="tabular value-gap sweep")
    common(sp)
    sp.add_argument("--pair", help="re-run a dumped MDP pair")

    sp = sub.add_parser("ablate", help="identification ablation table")
    common(sp)
    return p


def _resolve(args, run_dir_config: bool):
    from loopsr.experiment import RunConfig, RunDir, load_config

    if args.config:
        cfg = load_config(args.config)
    elif run_dir_config and RunDir(args.out).config.exists():
        cfg = RunDir(args.out).read_config()
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg.with_seed(args.seed)
    if getattr(args, "loops", None) is not None:
        cfg.loop.loops = args.loops
    if getattr(args, "test_terrain", None) is not None:
        cfg.test_env.terrain = args.test_terrain
    if getattr(args, "test_difficulty", None) is not None:
        cfg.test_env.difficulty = args.test_difficulty
    cfg.validate()
    return cfg


def cmd_pretrain(args) -> int:
    from loopsr.experiment import run_pretrain

    cfg = _resolve(args, run_dir_config=False)
    run_pretrain(cfg, args.out)
    print(f"pretrained run written to {args.out}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    from loopsr.experiment import RunDir, run_adapt

    cfg = _resolve(args, run_dir_config=True)
    RunDir(args.out).require("policy", "codec", "store")
    RunDir(args.out).write_config(cfg)
    res = run_adapt(cfg, args.out)
    s = res["summary"]
    print(f"{s['terrain']} d={s['difficulty']}: origin {s['origin_reward']:.4f} adapted {s['adapted_reward']:.4f}"
          + (f" expert {s['expert_reward']:.4f}" if s["expert_reward"] != "" else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    from loopsr.experiment import run_eval

    cfg = _resolve(args, run_dir_config=True)
    doc = run_eval(cfg, args.out)
    for name, m in doc["results"].items():
        print(f"{name}: mean reward {m['mean_reward']:.4f}")
    return EXIT_OK


def cmd_theory(args) -> int:
    from loopsr import mdpgap

    cfg = _resolve(args, run_dir_config=False).theory
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.pair:
        if not Path(args.pair).is_file():
            raise MissingArtifactError(f"missing artifact 'pair': {args.pair}")
        pairs = [(0, mdpgap.load_pair(args.pair, check=False))]
    else:
        pairs = mdpgap.sweep_pairs(cfg)
    rows, held = [], 0
    for k, (M, M_R) in pairs:
        try:
            rep = mdpgap.bound_rhs(M, M_R)
            ok = rep.max_residual < cfg.residual_tol
        except (FloatingPointError, ArithmeticError, ValueError) as exc:
            log.error("pair %d failed: %s", k, exc)
            ok = False
        if not ok:
            dump = out / f"failed_pair_{k}.json"
            mdpgap.dump_pair(M, M_R, dump)
            mdpgap.write_sweep_csv(rows, out / "theory.csv")
            print(f"identity check failed on pair {k}; pair written to {dump}", file=sys.stderr)
            return EXIT_NUMERIC
        rows.append(mdpgap.report_row(k, M, rep))
        held += rep.bound_holds
    mdpgap.write_sweep_csv(rows, out / "theory.csv")
    summary = {"pairs": len(rows), "identity_failures": 0, "bound_holds": held,
               "bound_fraction": held / len(rows), "max_residual": max(float(r["residual"]) for r in rows)}
    (out / "theory_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{len(rows)} pairs, identity holds on all; inequality holds on {held}/{len(rows)}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from loopsr.experiment import TABLE_ROWS, VARIANTS, run_ablate

    cfg = _resolve(args, run_dir_config=True)
    doc = run_ablate(cfg, args.out)
    print("domain".ljust(10) + "".join(v.rjust(14) for v in VARIANTS))
    for row in TABLE_ROWS:
        print(row.ljust(10) + "".join(f"{doc['table'][v][row]:14.3f}" for v in VARIANTS))
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "eval": cmd_eval, "theory": cmd_theory,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from loopsr.experiment import env_threads

        env_threads()
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
