"""Command-line entry point.

Subcommands: calibrate (rate-threshold bisection), train (PPO), eval
(500-episode metric runs), sweep (speed / arrival-probability grids) and
figdata (figure-ready CSV bundles).  Exit codes: 0 ok, 2 config error,
3 infeasible calibration, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import metrics as M
from . import ppo
from .config import (ConfigError, SystemConfig, config_hash, dump_config,
                     load_config, save_config)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CALIBRATION = 3
EXIT_MISSING = 4

SPEED_SWEEP = (6.0, 8.0, 10.0, 12.0, 14.0)
ARRIVAL_SCALES = (0.6, 0.7, 0.8, 0.9, 1.0)


def _load_cfg(args) -> SystemConfig:
    cfg = load_config(args.config) if args.config else SystemConfig()
    updates = {}
    if getattr(args, "scenario", None):
        updates["scenario"] = args.scenario
    if getattr(args, "speed", None) is not None:
        updates["speed"] = args.speed
    if updates.get("speed") is not None:
        cfg = dataclasses.replace(cfg, mean_speed_mps=updates.pop("speed"))
    if "scenario" in updates:
        cfg = dataclasses.replace(cfg, scenario=updates.pop("scenario"))
    return cfg


# -- calibrate --------------------------------------------------------------------

def calibrate_rate_threshold(cfg: SystemConfig, seed: int, episodes: int = 30,
                             target=(0.93, 0.97), max_iters: int = 40,
                             log=print) -> float:
    """Bisect the success threshold until the genie policy's per-TTI success
    rate lands in the target band (clutter-free, mean speed 6).

    The same episode seeds are reused for every candidate, so the success
    rate is exactly non-increasing in the threshold and bisection is clean.
    """
    base = dataclasses.replace(cfg, scenario="clean", mean_speed_mps=6.0)

    def success_rate(r_th: float) -> float:
        trial = dataclasses.replace(base, rate_threshold=r_th)
        res = M.run_eval(trial, "genie", seed=seed, episodes=episodes)
        return float(res.column("success_rate").mean())

    lo, hi = 0.0, 1.0
    while success_rate(hi) > target[0]:
        lo, hi = hi, hi * 4.0
        if hi > 1e12:
            raise RuntimeError("calibration failed to bracket the threshold")
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        rate = success_rate(mid)
        log(f"  r_th={mid:.6g} -> genie success {rate:.3f}")
        if target[0] <= rate <= target[1]:
            return mid
        if rate > target[1]:
            lo = mid
        else:
            hi = mid
    raise RuntimeError("calibration did not converge to the target band")


def cmd_calibrate(args) -> int:
    cfg = _load_cfg(args)
    try:
        r_th = calibrate_rate_threshold(cfg, args.seed)
    except RuntimeError as exc:
        print(f"calibration infeasible: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    print(f"calibrated rate_threshold = {r_th:.6g}")
    if args.out:
        save_config(dataclasses.replace(cfg, rate_threshold=r_th), args.out)
        print(f"wrote config to {args.out}")
    return EXIT_OK


# -- train -------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    steps = args.steps
    if args.paper_scale:
        steps = 1_200_000
    os.makedirs(args.out, exist_ok=True)

    def progress(row):
        print(f"update {row['update']:4d} step {row['step']:7d} "
              f"ma_reward {row['ma_reward']:8.2f} lr {row['lr']:.2e} "
              f"kl {row.get('approx_kl', 0.0):+.4f}", flush=True)

    resume = args.resume if args.resume else None
    if resume and not os.path.exists(resume):
        print(f"missing checkpoint: {resume}", file=sys.stderr)
        return EXIT_MISSING
    result = ppo.train(cfg, seed=args.seed, out_dir=args.out,
                       variant=args.variant, total_steps=steps,
                       progress=progress if args.verbose else None,
                       resume_from=resume)
    curve_cols = ["update", "step", "episodes", "ma_reward", "policy_loss",
                  "value_loss", "entropy", "approx_kl", "clip_fraction", "lr"]
    rows = [[r.get(c, 0.0) for c in curve_cols] for r in result.curve_rows]
    M.write_csv(os.path.join(args.out, "train_curve.csv"), curve_cols, rows,
                {"config_hash": config_hash(cfg), "seed": args.seed,
                 "variant": args.variant, "total_steps": steps or cfg.rl.total_steps})
    print(f"final moving-average reward: {result.final_moving_avg:.2f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------------

def _prepare_policy(args, cfg):
    """Returns (policy_name, agent, variant) resolving checkpoints."""
    if args.policy == "ppo":
        if not args.checkpoint or not os.path.exists(args.checkpoint):
            raise FileNotFoundError(args.checkpoint or "<no checkpoint given>")
        agent, variant, _ = ppo.agent_from_checkpoint(args.checkpoint)
        return f"ppo_{variant}", agent, variant
    return args.policy, None, "mb"


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    try:
        name, agent, variant = _prepare_policy(args, cfg)
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    res = M.run_eval(cfg, name, seed=args.seed, episodes=args.episodes,
                     agent=agent, variant=variant, x_tdma_x=args.x,
                     progress=(lambda d, t: print(f"  {d}/{t} episodes",
                                                  flush=True))
                     if args.verbose else None)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    M.write_csv(args.out, M.EVAL_COLUMNS, res.rows, res.meta)
    mean_r, ci = M.mean_ci(res.episode_rewards)
    print(f"{name}: mean episode reward {mean_r:.2f} +- {ci:.2f} "
          f"({args.episodes} episodes)")
    return EXIT_OK


# -- sweep -------------------------------------------------------------------------

def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    policies = args.policies.split(",")
    os.makedirs(args.out, exist_ok=True)
    agents = {}
    for p in policies:
        if p == "ppo":
            if not args.checkpoint or not os.path.exists(args.checkpoint):
                print(f"missing artifact: {args.checkpoint}", file=sys.stderr)
                return EXIT_MISSING
            agents[p] = ppo.agent_from_checkpoint(args.checkpoint)

    if args.kind == "speed":
        grid = [float(v) for v in args.speeds.split(",")] if args.speeds \
            else list(SPEED_SWEEP)
        for policy in policies:
            for v in grid:
                run_cfg = dataclasses.replace(cfg, mean_speed_mps=v)
                agent, variant = (None, "mb")
                name = policy
                if policy == "ppo":
                    a, variant, _ = agents[policy]
                    agent, name = a, f"ppo_{variant}"
                res = M.run_eval(run_cfg, name, seed=args.seed,
                                 episodes=args.episodes, agent=agent,
                                 variant=variant, x_tdma_x=args.x)
                path = os.path.join(args.out, f"eval_{name}_v{v:g}.csv")
                M.write_csv(path, M.EVAL_COLUMNS, res.rows, res.meta)
                print(f"wrote {path}")
    else:  # arrival sweep
        scales = [float(s) for s in args.scales.split(",")] if args.scales \
            else list(ARRIVAL_SCALES)
        for policy in policies:
            for s in scales:
                probs = tuple(min(1.0, s * p) for p in cfg.arrival_probs)
                run_cfg = dataclasses.replace(cfg, arrival_probs=probs)
                agent, variant = (None, "mb")
                name = policy
                if policy == "ppo":
                    a, variant, _ = agents[policy]
                    agent, name = a, f"ppo_{variant}"
                res = M.run_eval(run_cfg, name, seed=args.seed,
                                 episodes=args.episodes, agent=agent,
                                 variant=variant, x_tdma_x=args.x)
                res.meta["arrival_scale"] = s
                path = os.path.join(args.out, f"eval_{name}_ar{s:g}.csv")
                M.write_csv(path, M.EVAL_COLUMNS, res.rows, res.meta)
                print(f"wrote {path}")
    return EXIT_OK


# -- figdata -----------------------------------------------------------------------

def _result_from_csv(path):
    meta, cols, raw = M.read_csv(path)
    if cols != M.EVAL_COLUMNS:
        raise ConfigError(f"{path}: unexpected eval schema")
    return meta, raw


def cmd_figdata(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    results = {}
    by_speed = {}
    by_scale = {}
    for path in args.inputs:
        if not os.path.exists(path):
            print(f"missing artifact: {path}", file=sys.stderr)
            return EXIT_MISSING
        meta, raw = _result_from_csv(path)
        res = M.EvalResult(rows=raw, episode_rewards=np.empty(0),
                           wait_histogram=M.wait_histogram_from_meta(meta, cfg),
                           meta=meta)
        policy = meta.get("policy", os.path.basename(path))
        results[policy] = res
        if "mean_speed" in meta:
            by_speed[(policy, float(meta["mean_speed"]))] = res
        if "arrival_scale" in meta:
            by_scale[(policy, float(meta["arrival_scale"]))] = res

    stamp = {"config_hash": config_hash(cfg), "seed": args.seed}
    written = []
    out = os.path.join(args.out, "throughput_cdf.csv")
    M.write_csv(out, ["policy", "throughput", "cdf"],
                M.throughput_cdf_rows(results), dict(stamp, kind="throughput_cdf"))
    written.append(out)
    out = os.path.join(args.out, "latency_hist.csv")
    M.write_csv(out, ["policy", "wait_tti", "probability"],
                M.latency_hist_rows(results, cfg), dict(stamp, kind="latency_hist"))
    written.append(out)
    out = os.path.join(args.out, "err_prob_vs_speed.csv")
    M.write_csv(out, ["policy", "speed", "p_eps_d", "ci_d", "p_eps_v", "ci_v"],
                M.err_prob_vs_speed_rows(by_speed), dict(stamp, kind="err_vs_speed"))
    written.append(out)
    if by_scale:
        out = os.path.join(args.out, "latency_vs_arrival.csv")
        M.write_csv(out, ["policy", "arrival_scale", "mean_latency", "ci"],
                    M.latency_vs_arrival_rows(by_scale),
                    dict(stamp, kind="latency_vs_arrival"))
        written.append(out)
    for path in written:
        print(f"wrote {path}")
    if args.render:
        try:
            from isacplots.render import render_bundle
        except ImportError:
            print("missing artifact: the isac-plots package is not installed",
                  file=sys.stderr)
            return EXIT_MISSING
        for img in render_bundle(args.out, args.out):
            print(f"wrote {img}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isacsim",
                                description="Cross-layer ISAC beam scheduling "
                                            "simulator and learning harness")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=0):
        sp.add_argument("--config", default=None, help="INI config file")
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--scenario", choices=["clean", "cluttered"], default=None)
        sp.add_argument("--speed", type=float, default=None,
                        help="mean user speed m/s")
        sp.add_argument("--verbose", action="store_true")

    sp = sub.add_parser("calibrate", help="bisect the rate threshold")
    common(sp)
    sp.add_argument("--out", default=None, help="write calibrated config here")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("train", help="train the PPO agent")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--steps", type=int, default=None,
                    help="override total env steps (default from config)")
    sp.add_argument("--paper-scale", action="store_true",
                    help="use the full 1.2e6-step schedule")
    sp.add_argument("--variant", choices=["mb", "1b"], default="mb")
    sp.add_argument("--resume", default=None, help="checkpoint to resume from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a policy")
    common(sp)
    sp.add_argument("--policy", required=True,
                    choices=["genie", "aod_based", "x_tdma", "random", "ppo"])
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--episodes", type=int, default=500)
    sp.add_argument("--x", type=int, default=1, help="X for x_tdma")
    sp.add_argument("--out", required=True, help="metrics CSV path")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="policy sweeps over speed or arrivals")
    common(sp)
    sp.add_argument("--kind", choices=["speed", "arrival"], default="speed")
    sp.add_argument("--policies", default="genie,x_tdma,random")
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--episodes", type=int, default=100)
    sp.add_argument("--speeds", default=None, help="comma list, default 6..14")
    sp.add_argument("--scales", default=None,
                    help="arrival probability scales, default 0.6..1.0")
    sp.add_argument("--x", type=int, default=1)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("figdata", help="assemble figure-ready CSV bundles")
    common(sp)
    sp.add_argument("--inputs", nargs="+", required=True,
                    help="eval metrics CSVs")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--render", action="store_true",
                    help="also render figures (needs the isac-plots package)")
    sp.set_defaults(func=cmd_figdata)

    sp = sub.add_parser("dump-config", help="print the effective config")
    common(sp)
    sp.set_defaults(func=lambda a: (print(dump_config(_load_cfg(a)), end=""),
                                    EXIT_OK)[1])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
