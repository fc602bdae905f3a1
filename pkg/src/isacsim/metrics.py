"""Episode metrics, evaluation loops and the delimited output format.

Every CSV starts with `# key=value` meta lines declaring the schema
version, config hash and seed, so a rerun with the same inputs is
byte-identical and every aggregate can be recomputed from the rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .config import SystemConfig, config_hash
from .env import BeamSchedulingEnv, resolve_collisions
from .phy import bin_center_angle

SCHEMA_VERSION = 1
ERROR_THRESHOLD = 0.2  # normalized estimation error target for P(eps < 0.2)


# -- CSV ------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if math.isnan(v):
            return "nan"
        return f"{float(v):.10g}"
    return str(v)


def write_csv(path: str, columns: Sequence[str], rows: Sequence[Sequence],
              meta: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# schema=v{meta.get('schema', SCHEMA_VERSION)}\n")
        for key in sorted(k for k in meta if k != "schema"):
            fh.write(f"# {key}={meta[key]}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv(path: str) -> tuple:
    """Returns (meta dict, column list, list of row lists of strings)."""
    meta, columns, rows = {}, None, []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
            elif columns is None:
                columns = line.split(",")
            elif line:
                rows.append(line.split(","))
    return meta, columns or [], rows


def mean_ci(values: Sequence[float]) -> tuple:
    """(mean, 95% CI half-width) under the normal approximation."""
    arr = np.asarray([v for v in values if not math.isnan(v)], dtype=float)
    if arr.size == 0:
        return math.nan, math.nan
    if arr.size == 1:
        return float(arr[0]), math.nan
    se = arr.std(ddof=1) / math.sqrt(arr.size)
    return float(arr.mean()), 1.96 * se


# -- per-episode metrics -----------------------------------------------------------

EVAL_COLUMNS = [
    "episode", "user", "position_set", "episode_reward", "throughput",
    "mean_latency", "instant_fraction", "delivered", "arrived",
    "overflow_drops", "expiry_drops", "p_eps_d", "p_eps_v",
    "mean_eps_d", "mean_eps_v", "mean_aod_error", "success_rate",
]


@dataclass
class EvalResult:
    rows: List[list]
    episode_rewards: np.ndarray
    wait_histogram: np.ndarray  # delivered-wait counts, index = wait in TTIs
    meta: dict

    def column(self, name: str) -> np.ndarray:
        idx = EVAL_COLUMNS.index(name)
        return np.asarray([float(r[idx]) for r in self.rows])


def run_episode(env: BeamSchedulingEnv, policy=None, agent=None) -> dict:
    """One evaluated episode under a baseline policy or a greedy agent."""
    cfg = env.cfg
    n_u = cfg.n_users
    obs = env.reset()
    if policy is not None:
        policy.reset(env)
    total_reward = 0.0
    waits: List[List[int]] = [[] for _ in range(n_u)]
    eps_d_hits = np.zeros(n_u)
    eps_v_hits = np.zeros(n_u)
    eps_d_sum = np.zeros(n_u)
    eps_v_sum = np.zeros(n_u)
    aod_err_sum = np.zeros(n_u)
    successes = np.zeros(n_u)
    for _t in range(cfg.ttis_per_episode):
        if policy is not None:
            requests, hints = policy.propose(env)
            alloc = resolve_collisions(requests, env.buffers.occupancies,
                                       env.buffers.head_waits, cfg.n_tx_antennas)
            snap = env.step(allocation=alloc, aod_hints=hints)
        else:
            snap = env.step(action=agent.act_greedy(obs))
        obs = snap.observation
        total_reward += snap.reward
        info = snap.info
        out = info["sensing"]
        geo = info["geometry"]
        for u in range(n_u):
            w = info["delivered_waits"][u]
            if w is not None:
                waits[u].append(w)
            eps_d_hits[u] += out.eps_d[u] < ERROR_THRESHOLD
            eps_v_hits[u] += out.eps_v[u] < ERROR_THRESHOLD
            eps_d_sum[u] += out.eps_d[u]
            eps_v_sum[u] += out.eps_v[u]
            center = bin_center_angle(int(out.chosen_bins[u]), cfg.n_tx_antennas)
            err = abs(math.remainder(center - geo.user_aods[u], 2 * math.pi))
            aod_err_sum[u] += err
            successes[u] += bool(info["successes"][u])
    n = cfg.ttis_per_episode
    assert env.buffers.conservation_ok(), "packet conservation violated"
    per_user = []
    for u in range(n_u):
        buf = env.buffers.buffers[u]
        thr = buf.delivered / buf.arrived if buf.arrived else 1.0
        mean_lat = float(np.mean(waits[u])) if waits[u] else math.nan
        instant = (sum(1 for w in waits[u] if w == 0) / len(waits[u])
                   if waits[u] else math.nan)
        per_user.append({
            "throughput": thr, "mean_latency": mean_lat,
            "instant_fraction": instant, "delivered": buf.delivered,
            "arrived": buf.arrived, "overflow_drops": buf.overflow_drops,
            "expiry_drops": buf.expiry_drops,
            "p_eps_d": eps_d_hits[u] / n, "p_eps_v": eps_v_hits[u] / n,
            "mean_eps_d": eps_d_sum[u] / n, "mean_eps_v": eps_v_sum[u] / n,
            "mean_aod_error": aod_err_sum[u] / n,
            "success_rate": successes[u] / n,
        })
    return {"reward": total_reward, "per_user": per_user,
            "position_set": env.position_set_id, "waits": waits}


def run_eval(cfg: SystemConfig, policy_name: str, seed: int, episodes: int,
             agent=None, policy=None, variant: str = "mb", x_tdma_x: int = 1,
             progress=None, train_pool: bool = False,
             build_observation: Optional[bool] = None) -> EvalResult:
    """Evaluate a policy over pooled-position episodes and collect metric rows."""
    from .baselines import make_policy

    if policy is None and agent is None:
        policy = make_policy(policy_name, cfg, x_tdma_x)
    if build_observation is None:
        build_observation = agent is not None or (
            policy is not None and policy.reads_observation)
    env = BeamSchedulingEnv(
        cfg, seed, train_pool=train_pool, variant=variant,
        collect_music=bool(policy is not None and policy.needs_music),
        build_observation=build_observation)
    if agent is not None:
        env.normalizer = agent.normalizer
        env.normalizer.frozen = True
    rows = []
    rewards = []
    hist = np.zeros(max(cfg.deadlines) + 1, dtype=int)
    for ep in range(episodes):
        res = run_episode(env, policy=policy, agent=agent)
        rewards.append(res["reward"])
        for u, m in enumerate(res["per_user"]):
            rows.append([ep, u + 1, res["position_set"], res["reward"]]
                        + [m[k] for k in EVAL_COLUMNS[4:]])
            for w in res["waits"][u]:
                hist[min(w, len(hist) - 1)] += 1
        if progress and (ep + 1) % 50 == 0:
            progress(ep + 1, episodes)
    meta = {"config_hash": config_hash(cfg), "seed": seed,
            "policy": policy_name, "episodes": episodes,
            "scenario": cfg.scenario, "mean_speed": cfg.mean_speed_mps,
            "wait_histogram": ",".join(str(int(c)) for c in hist)}
    return EvalResult(rows=rows, episode_rewards=np.asarray(rewards),
                      wait_histogram=hist, meta=meta)


def wait_histogram_from_meta(meta: dict, cfg: SystemConfig) -> np.ndarray:
    raw = meta.get("wait_histogram", "")
    if not raw:
        return np.zeros(max(cfg.deadlines) + 1, dtype=int)
    return np.asarray([int(tok) for tok in raw.split(",")], dtype=int)


# -- figure data ---------------------------------------------------------------------

def throughput_cdf_rows(results: dict) -> list:
    """CDF grid of per-(episode, user) throughput for each policy."""
    rows = []
    for policy, res in results.items():
        values = np.sort(res.column("throughput"))
        n = len(values)
        for i, v in enumerate(values):
            rows.append([policy, v, (i + 1) / n])
    return rows


def latency_hist_rows(results: dict, cfg: SystemConfig) -> list:
    """Delivered-wait histogram, integer TTIs from 0 to the max deadline."""
    rows = []
    for policy, res in results.items():
        total = int(res.wait_histogram.sum())
        for w, count in enumerate(res.wait_histogram):
            p = count / total if total else 0.0
            rows.append([policy, w, p])
    return rows


def err_prob_vs_speed_rows(results_by_speed: dict) -> list:
    """P(eps_d < 0.2) and P(eps_v < 0.2) with CIs per (policy, speed)."""
    rows = []
    for (policy, speed), res in sorted(results_by_speed.items()):
        pd, cid = mean_ci(res.column("p_eps_d"))
        pv, civ = mean_ci(res.column("p_eps_v"))
        rows.append([policy, speed, pd, cid, pv, civ])
    return rows


def latency_vs_arrival_rows(results_by_scale: dict) -> list:
    rows = []
    for (policy, scale), res in sorted(results_by_scale.items()):
        lat, ci = mean_ci(res.column("mean_latency"))
        rows.append([policy, scale, lat, ci])
    return rows
