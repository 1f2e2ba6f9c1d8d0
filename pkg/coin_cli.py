#!/usr/bin/env python3
"""
Command-line front end of the COIN motion/camera estimator.

Subcommands: gen, fit-prior, optimize, evaluate, ablate, serve.
Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O error, 1 any other failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

sys.path.append(str(Path(__file__).parent))

from config.schemas import Ablation, LOSS_TERMS, RunConfig, load_model, parse_model
from config.settings import Method, settings
from utils.errors import EXIT_FAILURE, EXIT_OK, CoinError, exit_code_for

logger = logging.getLogger("coin_cli")


def _print(result: Any) -> None:
    print(json.dumps(result, indent=2, sort_keys=True, default=str))


def _run_config(args: argparse.Namespace) -> RunConfig:
    """Run config from --config with command-line overrides applied on top."""
    data: Dict[str, Any] = load_model(RunConfig, args.config).model_dump(mode="json") if args.config else {}
    overrides = {
        "scenario": args.scenario, "dataset": args.dataset, "prior": args.prior, "method": args.method,
        "ablations": args.ablation, "drop_terms": args.drop_term, "seed": args.seed,
        "scenario_seed": args.scenario_seed, "output_dir": args.out, "init_mode": args.init_mode,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    optim = dict(data.get("optim", {}))
    if args.steps is not None:
        optim["stage_steps"] = args.steps
    if args.parallel:
        optim["parallel"] = True
    if optim:
        data["optim"] = optim
    return parse_model(RunConfig, data)


def cmd_gen(args: argparse.Namespace) -> None:
    from backend.commands import cmd_gen as run
    _print(run(args.scenario, args.seed, args.out))


def cmd_fit_prior(args: argparse.Namespace) -> None:
    from backend.commands import cmd_fit_prior as run
    _print(run(args.components, args.seed, args.out, dataset=args.dataset, corpus_size=args.corpus_size,
               n_frames=args.frames, covariance_type=args.covariance))


def cmd_optimize(args: argparse.Namespace) -> None:
    from backend.commands import cmd_optimize as run
    _print(run(_run_config(args)))


def cmd_evaluate(args: argparse.Namespace) -> None:
    from backend.commands import cmd_evaluate as run
    _print(run(args.run_dir, args.ground_truth))


def cmd_ablate(args: argparse.Namespace) -> None:
    from backend.commands import ABLATION_VARIANTS, cmd_ablate as run
    base = {"optim": {"stage_steps": args.steps}} if args.steps is not None else {}
    variants = args.variant or list(ABLATION_VARIANTS)
    table = run(args.scenarios, args.seeds, args.prior, args.out, parse_model(RunConfig, base), variants)
    print(table.to_string(index=False))


def cmd_serve(args: argparse.Namespace) -> None:
    import uvicorn
    logger.info(f"🚀 Serving on {args.host}:{args.port}")
    uvicorn.run("backend.main:app", host=args.host, port=args.port, log_level=settings.log_level.lower())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coin", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset from a scenario file")
    gen.add_argument("--scenario", required=True, help="scenario JSON file")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", help="output directory (default: $COIN_OUTPUT_ROOT/datasets/<name>-seed<seed>)")
    gen.set_defaults(func=cmd_gen)

    fit = sub.add_parser("fit-prior", help="fit the Gaussian-mixture motion prior")
    fit.add_argument("-K", "--components", type=int, default=8)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--out", required=True, help="prior file (.json for text, anything else for an archive)")
    fit.add_argument("--dataset", help="corpus archive with a 'windows' array; generated when omitted")
    fit.add_argument("--corpus-size", type=int, default=512)
    fit.add_argument("--frames", type=int, default=128, help="window length of the prior")
    fit.add_argument("--covariance", choices=["diag", "full"], default="diag")
    fit.set_defaults(func=cmd_fit_prior)

    opt = sub.add_parser("optimize", help="run a method on a dataset or scenario")
    opt.add_argument("--config", help="run config JSON; flags override its fields")
    opt.add_argument("--scenario", help="scenario JSON (data generated with --scenario-seed)")
    opt.add_argument("--dataset", help="dataset directory written by 'gen'")
    opt.add_argument("--prior", help="prior file (default: $COIN_DEFAULT_PRIOR)")
    opt.add_argument("--method", choices=[m.value for m in Method])
    opt.add_argument("--ablation", action="append", choices=[a.value for a in Ablation])
    opt.add_argument("--drop-term", action="append", choices=list(LOSS_TERMS))
    opt.add_argument("--seed", type=int)
    opt.add_argument("--scenario-seed", type=int)
    opt.add_argument("--init-mode", choices=["exact", "ddpm"])
    opt.add_argument("--steps", type=int, nargs=3, metavar=("S1", "S2", "S3"), help="steps per stage")
    opt.add_argument("--parallel", action="store_true", help="optimize windows on a thread pool")
    opt.add_argument("--out", help="run directory (default: $COIN_OUTPUT_ROOT/<scenario>-<hash>-seed<seed>)")
    opt.set_defaults(func=cmd_optimize)

    ev = sub.add_parser("evaluate", help="compute metrics of a run directory")
    ev.add_argument("run_dir")
    ev.add_argument("--ground-truth", help="ground-truth archive (default: the run's dataset)")
    ev.set_defaults(func=cmd_evaluate)

    abl = sub.add_parser("ablate", help="run the ablation matrix and write a median table")
    abl.add_argument("--scenarios", nargs="+", required=True)
    abl.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
    abl.add_argument("--prior", required=True)
    abl.add_argument("--out", required=True, help="CSV table of median metrics per variant")
    abl.add_argument("--variant", action="append", help="restrict to these variants")
    abl.add_argument("--steps", type=int, nargs=3, metavar=("S1", "S2", "S3"))
    abl.set_defaults(func=cmd_ablate)

    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    settings.reload()
    logging.basicConfig(level=settings.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CoinError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return exit_code_for(e)
    except Exception as e:
        logger.error(f"❌ Unexpected failure: {e}")
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
