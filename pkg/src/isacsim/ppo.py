"""From-scratch PPO for the joint discrete beam-action space.

A two-hidden-layer tanh network (shared trunk, action-logit head and
scalar value head) trained with the clipped surrogate objective, Monte
Carlo advantages computed per episode, Adam, and a step-decay learning
rate.  Gradients are accumulated by explicit reverse-mode passes through
the network; everything is numpy and fully deterministic per seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import rng as streams
from .config import SystemConfig
from .env import BeamSchedulingEnv, ObsNormalizer
from .rng import SeededRng

CHECKPOINT_VERSION = 1


# -- network ---------------------------------------------------------------------

def _orthogonal(shape, gen, gain=1.0):
    a = gen.standard_normal(shape)
    q, r = np.linalg.qr(a if shape[0] >= shape[1] else a.T)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return gain * q[: shape[0], : shape[1]]


class PolicyValueNet:
    """MLP with tanh hidden layers and two output heads."""

    PARAM_KEYS = ("w1", "b1", "w2", "b2", "wp", "bp", "wv", "bv")

    def __init__(self, obs_dim: int, n_actions: int, hidden: int, init_rng: SeededRng):
        gen = init_rng.generator
        gain = math.sqrt(2.0)
        self.params = {
            "w1": _orthogonal((obs_dim, hidden), gen, gain),
            "b1": np.zeros(hidden),
            "w2": _orthogonal((hidden, hidden), gen, gain),
            "b2": np.zeros(hidden),
            "wp": _orthogonal((hidden, n_actions), gen, 0.01),
            "bp": np.zeros(n_actions),
            "wv": _orthogonal((hidden, 1), gen, 1.0),
            "bv": np.zeros(1),
        }
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.hidden = hidden

    def forward(self, x: np.ndarray):
        """Returns (logits, values, cache) for a (B, obs_dim) batch."""
        p = self.params
        z1 = x @ p["w1"] + p["b1"]
        h1 = np.tanh(z1)
        z2 = h1 @ p["w2"] + p["b2"]
        h2 = np.tanh(z2)
        logits = h2 @ p["wp"] + p["bp"]
        values = (h2 @ p["wv"] + p["bv"])[:, 0]
        return logits, values, (x, h1, h2)

    def backward(self, cache, d_logits: np.ndarray, d_values: np.ndarray) -> Dict:
        x, h1, h2 = cache
        p = self.params
        grads = {}
        grads["wp"] = h2.T @ d_logits
        grads["bp"] = d_logits.sum(axis=0)
        grads["wv"] = h2.T @ d_values[:, None]
        grads["bv"] = d_values.sum(axis=0, keepdims=True).reshape(1)
        dh2 = d_logits @ p["wp"].T + d_values[:, None] @ p["wv"].T
        dz2 = dh2 * (1.0 - h2 ** 2)
        grads["w2"] = h1.T @ dz2
        grads["b2"] = dz2.sum(axis=0)
        dh1 = dz2 @ p["w2"].T
        dz1 = dh1 * (1.0 - h1 ** 2)
        grads["w1"] = x.T @ dz1
        grads["b1"] = dz1.sum(axis=0)
        return grads

    # flat-vector helpers (checkpointing and finite-difference checks)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.PARAM_KEYS])

    def set_flat(self, flat: np.ndarray) -> None:
        off = 0
        for k in self.PARAM_KEYS:
            size = self.params[k].size
            self.params[k] = flat[off:off + size].reshape(self.params[k].shape).copy()
            off += size

    def flatten_grads(self, grads: Dict) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in self.PARAM_KEYS])


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


# -- losses ------------------------------------------------------------------------

def clipped_loss(ratio: float, advantage: float, eps: float) -> float:
    """Single-sample clipped surrogate objective (to be maximized)."""
    return min(ratio * advantage,
               float(np.clip(ratio, 1.0 - eps, 1.0 + eps)) * advantage)


def discounted_returns(rewards: np.ndarray, dones: np.ndarray, gamma: float) -> np.ndarray:
    """Per-episode discounted suffix sums; no bootstrapping across dones."""
    out = np.empty_like(rewards, dtype=float)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        if dones[t]:
            running = 0.0
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def advantage(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
              gamma: float, normalize: bool = True,
              use_gae: bool = False, lam: float = 0.95) -> tuple:
    """(advantages, returns).  Default is the Monte Carlo form
    A_t = sum_{i>=t} gamma^(i-t) r_i - V(s_t); GAE sits behind a switch."""
    returns = discounted_returns(rewards, dones, gamma)
    if use_gae:
        adv = np.empty_like(rewards, dtype=float)
        gae = 0.0
        for t in range(len(rewards) - 1, -1, -1):
            next_v = 0.0 if (t == len(rewards) - 1 or dones[t]) else values[t + 1]
            delta = rewards[t] + gamma * next_v - values[t]
            gae = delta if dones[t] else delta + gamma * lam * gae
            adv[t] = gae
        returns = adv + values
    else:
        adv = returns - values
    if normalize and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


def ppo_loss_and_grad(net: PolicyValueNet, batch: dict, clip_eps: float,
                      value_coef: float, entropy_coef: float) -> tuple:
    """Total minimized loss and its flat gradient for one minibatch.

    loss = policy_loss + value_coef * value_mse - entropy_coef * entropy
    """
    obs = batch["obs"]
    actions = batch["actions"].astype(int)
    old_logp = batch["log_probs"]
    adv = batch["advantages"]
    rets = batch["returns"]
    n = len(actions)

    logits, values, cache = net.forward(obs)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    logp_a = logp_all[np.arange(n), actions]
    ratio = np.exp(logp_a - old_logp)

    upper_clip = (adv >= 0) & (ratio > 1.0 + clip_eps)
    lower_clip = (adv < 0) & (ratio < 1.0 - clip_eps)
    active = ~(upper_clip | lower_clip)
    clipped_ratio = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    objective = np.minimum(ratio * adv, clipped_ratio * adv)
    policy_loss = -objective.mean()

    entropy = -(probs * logp_all).sum(axis=1)
    value_err = values - rets
    value_loss = 0.5 * (value_err ** 2).mean()
    total = policy_loss + value_coef * value_loss - entropy_coef * entropy.mean()

    # d(total)/d(logits)
    g_logp = -(ratio * adv * active) / n                     # coefficient on logp_a
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), actions] = 1.0
    d_logits = g_logp[:, None] * (onehot - probs)
    d_logits += entropy_coef * probs * (logp_all + entropy[:, None]) / n
    d_values = value_coef * value_err / n

    grads = net.backward(cache, d_logits, d_values)
    stats = {
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy.mean()),
        "approx_kl": float(np.mean(old_logp - logp_a)),
        "clip_fraction": float(np.mean(upper_clip | lower_clip)),
    }
    return float(total), net.flatten_grads(grads), stats


# -- optimizer -----------------------------------------------------------------------

class Adam:
    def __init__(self, size: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        return {"m": self.m, "v": self.v, "t": self.t}

    def load_state_dict(self, state):
        self.m = np.asarray(state["m"], dtype=float)
        self.v = np.asarray(state["v"], dtype=float)
        self.t = int(state["t"])


def lr_at(schedule, env_steps: int) -> float:
    lr = schedule.learning_rate
    for frac in schedule.lr_milestones:
        if env_steps >= frac * schedule.total_steps:
            lr *= schedule.lr_decay_factor
    return lr


# -- agent ----------------------------------------------------------------------------

class PpoAgent:
    def __init__(self, net: PolicyValueNet, normalizer: ObsNormalizer):
        self.net = net
        self.normalizer = normalizer

    def act_sample(self, obs: np.ndarray, gen) -> tuple:
        logits, value, _ = self.net.forward(obs[None, :])
        logp = log_softmax(logits)[0]
        p = np.exp(logp)
        p = p / p.sum()
        action = int(gen.choice(len(p), p=p))
        return action, float(logp[action]), float(value[0])

    def act_greedy(self, obs: np.ndarray) -> int:
        logits, _, _ = self.net.forward(obs[None, :])
        return int(np.argmax(logits[0]))


def save_checkpoint(path: str, net: PolicyValueNet, adam: Optional[Adam],
                    normalizer: ObsNormalizer, env_steps: int, episodes: int,
                    updates: int, variant: str, extra: Optional[dict] = None) -> None:
    """Versioned header plus the flat parameter array and schedule state."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "obs_dim": net.obs_dim,
        "n_actions": net.n_actions,
        "hidden": net.hidden,
        "params_flat": net.get_flat(),
        "env_steps": env_steps,
        "episodes": episodes,
        "updates": updates,
        "variant": variant,
        "norm_count": normalizer.count,
        "norm_mean": normalizer.mean,
        "norm_m2": normalizer.m2,
    }
    if adam is not None:
        payload.update({"adam_m": adam.m, "adam_v": adam.v, "adam_t": adam.t})
    if extra:
        payload.update(extra)
    np.savez(path, **payload)


def load_checkpoint(path: str) -> dict:
    data = np.load(path, allow_pickle=False)
    if int(data["version"]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {int(data['version'])}")
    return {k: data[k] for k in data.files}


def agent_from_checkpoint(path: str, init_rng: Optional[SeededRng] = None) -> tuple:
    data = load_checkpoint(path)
    net = PolicyValueNet(int(data["obs_dim"]), int(data["n_actions"]),
                         int(data["hidden"]),
                         init_rng or SeededRng(0, streams.STREAM_PPO_INIT))
    net.set_flat(np.asarray(data["params_flat"], dtype=float))
    norm = ObsNormalizer()
    norm.load_state_dict({"count": data["norm_count"], "mean": data["norm_mean"],
                          "m2": data["norm_m2"]})
    norm.frozen = True
    variant = str(data["variant"])
    return PpoAgent(net, norm), variant, data


# -- training ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint_path: str
    curve_rows: List[dict]
    episode_rewards: List[float]
    final_moving_avg: float


def _save_train_state(path, net, adam, normalizer, env_steps, episodes, updates,
                      variant, env, sample_rng, episode_rewards):
    save_checkpoint(path, net, adam, normalizer, env_steps, episodes, updates,
                    variant,
                    extra={"pick_rng_state": env._pick_rng.state_array(),
                           "sample_rng_state": sample_rng.state_array(),
                           "episode_rewards": np.asarray(episode_rewards)})


def train(cfg: SystemConfig, seed: int, out_dir: str, variant: str = "mb",
          total_steps: Optional[int] = None,
          progress: Optional[Callable[[dict], None]] = None,
          resume_from: Optional[str] = None,
          stop_after_steps: Optional[int] = None) -> TrainResult:
    """Alternate whole-episode rollout collection and clipped-objective
    updates; deterministic per (config, seed).

    `stop_after_steps` interrupts the schedule early (the checkpoint then
    resumes it exactly); the learning-rate decay always follows the full
    `total_steps` schedule.
    """
    import os
    from dataclasses import replace as dc_replace

    sched = cfg.rl if total_steps is None else \
        dc_replace(cfg.rl, total_steps=int(total_steps))
    os.makedirs(out_dir, exist_ok=True)

    normalizer = ObsNormalizer()
    env = BeamSchedulingEnv(cfg, seed, train_pool=True, variant=variant,
                            normalizer=normalizer)
    net = PolicyValueNet(env.obs_dim, env.n_actions, sched.hidden_units,
                         SeededRng(seed, streams.STREAM_PPO_INIT))
    adam = Adam(net.get_flat().size)
    sample_rng = SeededRng(seed, streams.STREAM_PPO_SAMPLE)
    agent = PpoAgent(net, normalizer)

    env_steps = 0
    episodes = 0
    updates = 0
    episode_rewards: List[float] = []
    if resume_from:
        data = load_checkpoint(resume_from)
        net.set_flat(np.asarray(data["params_flat"], dtype=float))
        adam.load_state_dict({"m": data["adam_m"], "v": data["adam_v"],
                              "t": data["adam_t"]})
        normalizer.load_state_dict({"count": data["norm_count"],
                                    "mean": data["norm_mean"],
                                    "m2": data["norm_m2"]})
        env_steps = int(data["env_steps"])
        episodes = int(data["episodes"])
        updates = int(data["updates"])
        env._episode = episodes - 1
        env._pick_rng.restore_state(data["pick_rng_state"])
        sample_rng.restore_state(data["sample_rng_state"])
        episode_rewards = list(np.asarray(data["episode_rewards"], dtype=float))

    ep_len = cfg.ttis_per_episode
    episodes_per_rollout = max(1, round(sched.rollout_steps / ep_len))
    # returns are regressed in units of value_scale so the value head's
    # gradients through the shared trunk stay commensurate with the policy's;
    # advantage normalization makes the policy objective scale-invariant
    r_scale = 1.0 / max(sched.value_scale, 1e-9)
    curve_rows: List[dict] = []
    gen = sample_rng.generator
    ckpt_path = os.path.join(out_dir, "checkpoint.npz")
    last_ckpt_step = env_steps

    while env_steps < sched.total_steps and \
            (stop_after_steps is None or env_steps < stop_after_steps):
        obs_buf, act_buf, logp_buf, val_buf, rew_buf, done_buf = [], [], [], [], [], []
        for _ in range(episodes_per_rollout):
            obs = env.reset()
            done = False
            ep_reward = 0.0
            while not done:
                action, logp, value = agent.act_sample(obs, gen)
                snap = env.step(action=action)
                obs_buf.append(obs)
                act_buf.append(action)
                logp_buf.append(logp)
                val_buf.append(value)
                rew_buf.append(snap.reward * r_scale)
                done_buf.append(snap.done)
                ep_reward += snap.reward
                obs = snap.observation
                done = snap.done
                env_steps += 1
            episodes += 1
            episode_rewards.append(ep_reward)

        batch_obs = np.asarray(obs_buf)
        batch = {
            "obs": batch_obs,
            "actions": np.asarray(act_buf),
            "log_probs": np.asarray(logp_buf),
            "rewards": np.asarray(rew_buf),
            "values": np.asarray(val_buf),
            "dones": np.asarray(done_buf),
        }
        adv, rets = advantage(batch["rewards"], batch["values"], batch["dones"],
                              sched.discount, use_gae=sched.use_gae,
                              lam=sched.gae_lambda)
        batch["advantages"] = adv
        batch["returns"] = rets

        lr = lr_at(sched, env_steps)
        n = len(adv)
        stats = {}
        for _epoch in range(sched.epochs):
            perm = gen.permutation(n)
            for start in range(0, n, sched.minibatch_size):
                sel = perm[start:start + sched.minibatch_size]
                mini = {k: batch[k][sel] for k in
                        ("obs", "actions", "log_probs", "advantages", "returns")}
                total, grad, stats = ppo_loss_and_grad(
                    net, mini, sched.clip_eps, sched.value_coef, sched.entropy_coef)
                if not math.isfinite(total):
                    raise FloatingPointError("non-finite PPO loss; update aborted")
                net.set_flat(adam.step(net.get_flat(), grad, lr))
        updates += 1

        window = episode_rewards[-sched.moving_avg_episodes:]
        ma = float(np.mean(window))
        row = {"update": updates, "step": env_steps, "episodes": episodes,
               "ma_reward": ma, "lr": lr, **stats}
        curve_rows.append(row)
        if progress:
            progress(row)
        if env_steps - last_ckpt_step >= sched.checkpoint_every_steps:
            _save_train_state(ckpt_path, net, adam, normalizer, env_steps,
                              episodes, updates, variant, env, sample_rng,
                              episode_rewards)
            last_ckpt_step = env_steps

    _save_train_state(ckpt_path, net, adam, normalizer, env_steps, episodes,
                      updates, variant, env, sample_rng, episode_rewards)
    window = episode_rewards[-sched.moving_avg_episodes:] or [0.0]
    return TrainResult(checkpoint_path=ckpt_path, curve_rows=curve_rows,
                       episode_rewards=episode_rewards,
                       final_moving_avg=float(np.mean(window)))
