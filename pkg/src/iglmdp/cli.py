"""Command-line entry point: ``iglmdp {run,decode,verify,theory-params}``.

Exit codes: 0 success, 1 failed verification or unexpected error,
2 invalid configuration, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .config import GAMMA_MODES, ORACLES, ExperimentConfig, load_config
from .decoder import default_hypothesis_class, env_constants
from .env import rng_stream
from .errors import ConfigError, NumericalError, PipelineError
from .online import compute_theory_params, decoded_tables
from .pipeline import run_experiment, run_full_pipeline
from .verify import run_all

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    kw = {"epsilon": args.epsilon, "gamma_mode": args.gamma_mode, "out": args.out,
          "oracle": getattr(args, "oracle", None), "workers": getattr(args, "workers", None)}
    if args.seed is not None:
        kw["seeds"] = tuple(args.seed)
    if args.episodes is not None:
        kw["total_episodes"] = args.episodes
        kw["online_episodes"] = None
    if getattr(args, "online_episodes", None) is not None:
        kw["online_episodes"] = args.online_episodes
    return cfg.override(**kw).validate()


def _cmd_run(args) -> int:
    cfg = _resolve(args)
    reports = run_experiment(cfg, out=cfg.out)
    for rep in reports:
        s = rep.summary()
        print(f"seed {rep.seed}: reachable [{s.get('reachable', '')}] "
              f"episodes {s['episodes_total']} "
              f"final-window reward {s.get('final_window_true_reward', float('nan')):.4f} "
              f"regret {s.get('cumulative_regret', float('nan')):.2f}")
    print(f"wrote {Path(cfg.out).resolve()}")
    return EXIT_OK


def _cmd_decode(args) -> int:
    cfg = _resolve(args)
    env = cfg.build_env()
    consts = env_constants(env)
    labels = env.mdp.state_labels
    out = {}
    for seed in cfg.seeds:
        rep = run_full_pipeline(cfg, seed, stop_after="erm")
        J = decoded_tables(rep.hypotheses, consts, rep.reachable)
        diag = {"summary": rep.summary(), "decoded": {}}
        print(f"seed {seed}")
        for s, p in zip(rep.visitation.states, rep.visitation.p_hat):
            mark = "reachable" if s in rep.reachable else "filtered"
            print(f"  {labels[s]:>6}  visit freq {p:.4f}  {mark}")
        for s, h in sorted(rep.hypotheses.items()):
            print(f"  {labels[s]:>6}  ERM f#{h.f_index} phi#{h.phi_index}  "
                  f"matches truth: {rep.is_true[s]}  posterior risk {rep.risks[s]:.3g}")
            for x, xl in enumerate(env.contexts.labels):
                for y, yl in enumerate(env.feedback.symbols):
                    row = " ".join(f"{v:.3f}" for v in J[s][x, y])
                    print(f"          J(x={xl}, y={yl}, a=.) = {row}")
            diag["decoded"][labels[s]] = J[s].tolist()
        out[str(seed)] = diag
    if cfg.out:
        path = Path(cfg.out)
        try:
            path.mkdir(parents=True, exist_ok=True)
            with open(path / "decoder.json", "w") as fh:
                json.dump(out, fh, indent=1, sort_keys=True)
        except OSError as e:
            raise OSError(f"cannot write {path / 'decoder.json'}: {e.strerror or e}") from e
    return EXIT_OK


def _cmd_verify(args) -> int:
    cfg = _resolve(args)
    env = cfg.build_env()
    results = run_all(env, rng_stream(cfg.seeds[0], "verify"), quick=args.quick)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def _cmd_theory(args) -> int:
    cfg = _resolve(args)
    env = cfg.build_env()
    T = args.T if args.T is not None else cfg.horizon_T()
    S = args.S if args.S is not None else env.n_states
    K = args.K if args.K is not None else env.n_actions
    H = args.H if args.H is not None else env.horizon
    L = args.L if args.L is not None else env_constants(env).L
    reg = args.reg_sq
    if reg is None:
        reg = 2 * math.log(len(default_hypothesis_class(env, levels=cfg.levels).rewards))
    p = compute_theory_params(T, S, K, H, L, reg)
    print(f"T = {T}  S = {S}  K = {K}  H = {H}  L = {L:.6g}  Reg_Sq = {reg:.6g}")
    print(f"gamma = {p.gamma:.6g}")
    print(f"N0    = {p.n0:.6g}")
    print(f"eps   = {p.eps:.6g}")
    print(f"delta = {1.0 / T**2:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment file")
    common.add_argument("--seed", type=int, nargs="+", help="master seed(s)")
    common.add_argument("--episodes", type=int, help="total episode budget T")
    common.add_argument("--epsilon", type=float, help="reachability threshold parameter")
    common.add_argument("--gamma-mode", choices=GAMMA_MODES)
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="iglmdp", description="Interaction-grounded learning in layered MDPs.")
    sub = p.add_subparsers(dest="verb", required=True)
    run = sub.add_parser("run", parents=[common], help="full pipeline for every seed")
    run.add_argument("--online-episodes", type=int, help="fix the online phase length")
    run.add_argument("--oracle", choices=ORACLES)
    run.add_argument("--workers", type=int, help="processes for seed fan-out")
    run.set_defaults(func=_cmd_run)
    dec = sub.add_parser("decode", parents=[common], help="exploration and decoder fit only")
    dec.set_defaults(func=_cmd_decode)
    ver = sub.add_parser("verify", parents=[common], help="run the brute-force oracle suites")
    ver.add_argument("--quick", action="store_true", help="reduced sample sizes")
    ver.set_defaults(func=_cmd_verify)
    th = sub.add_parser("theory-params", parents=[common], help="print the rate-optimal gamma, N0, eps")
    for flag in ("T", "S", "K", "H"):
        th.add_argument(f"--{flag}", type=int)
    th.add_argument("--L", type=float)
    th.add_argument("--reg-sq", type=float)
    th.set_defaults(func=_cmd_theory)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return _code(e.cause)
    except (ConfigError, NumericalError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return _code(e)


def _code(exc) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
