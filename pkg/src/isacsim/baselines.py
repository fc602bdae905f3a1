"""Non-learning beam allocators: genie, AoD-estimation heuristic, X-TDMA
and uniform-random, plus fixed-pattern policies used for field-of-view
studies.  Every policy emits per-user beam index requests; the shared
collision resolver turns them into a valid allocation.
"""

from __future__ import annotations

import math
from typing import List, Optional, Tuple

import numpy as np

from .config import SystemConfig
from .env import BeamSchedulingEnv, resolve_collisions
from .phy import bin_center_angle, build_codebook, steering
from .sensing import crlb, music_aod


class Policy:
    """Interface: propose per-user beam requests for the next TTI."""

    name = "policy"
    needs_music = False
    reads_observation = True  # False allows the env to skip idle-bin stats

    def reset(self, env: BeamSchedulingEnv) -> None:
        pass

    def propose(self, env: BeamSchedulingEnv) -> Tuple[List[List[int]], Optional[np.ndarray]]:
        """Returns (per-user requested index lists, aod hints for power
        allocation or None)."""
        raise NotImplementedError


def best_bin(aod: float, codebook: np.ndarray) -> int:
    """Codeword (1-based) with the largest beamforming gain toward the angle."""
    a = steering(aod, codebook.shape[0])
    gains = np.abs(codebook.conj().T @ a)
    return int(np.argmax(gains)) + 1


class GeniePolicy(Policy):
    """Perfect AoD knowledge: one aligned beam per user."""

    name = "genie"
    reads_observation = False

    def __init__(self, cfg: SystemConfig):
        self.codebook = build_codebook(cfg.n_tx_antennas)

    def propose(self, env):
        geo = env.world.geometry()
        requests = [[best_bin(aod, self.codebook)] for aod in geo.user_aods]
        return requests, geo.user_aods.copy()


class AodBasedPolicy(Policy):
    """MUSIC AoD estimates; beam count driven by the estimation precision.

    A user whose angle-precision bound sits above the threshold gets the
    estimated bin plus its two neighbours (wider field of view); otherwise
    the previous allocation is kept.  User/estimate association is assumed
    known (closest true angle).
    """

    name = "aod_based"
    needs_music = True

    def __init__(self, cfg: SystemConfig):
        self.cfg = cfg
        self.codebook = build_codebook(cfg.n_tx_antennas)
        self.last_aods: Optional[np.ndarray] = None

    def reset(self, env):
        self.last_aods = None

    def propose(self, env):
        cfg = self.cfg
        n_u = cfg.n_users
        requests = [list(env.prev_alloc.beams[u]) for u in range(n_u)]
        if env.prev_music_snapshots is None or env.prev_estimates is None:
            return requests, self.last_aods
        try:
            est, _confident = music_aod(env.prev_music_snapshots, n_sources=n_u)
        except (np.linalg.LinAlgError, ValueError):
            return requests, self.last_aods
        true_aods = env.world.geometry().user_aods
        aods = _associate(est, true_aods)
        _, _, snr_hat = env.prev_estimates
        for u in range(n_u):
            sigma_phi = math.sqrt(crlb(max(snr_hat[u], 1e-12), cfg, aods[u])[2])
            if sigma_phi >= cfg.aod_precision_threshold:
                center = best_bin(aods[u], self.codebook)
                lo = min(max(center - 1, 1), cfg.n_tx_antennas - 2)
                requests[u] = [lo, lo + 1, lo + 2]
        self.last_aods = aods
        return requests, aods


def _associate(estimates: np.ndarray, true_aods: np.ndarray) -> np.ndarray:
    """Greedy assignment of estimated angles to users by closest truth."""
    est = list(estimates)
    out = np.empty(len(true_aods))
    for u in np.argsort(true_aods):
        if not est:
            out[u] = true_aods[u]
            continue
        k = int(np.argmin([abs(e - true_aods[u]) for e in est]))
        out[u] = est.pop(k)
    return out


class XTdmaPolicy(Policy):
    """One multi-beam sweep slot followed by X single-beam slots."""

    name = "x_tdma"

    def __init__(self, cfg: SystemConfig, x: int = 1):
        if x < 0:
            raise ValueError("X must be >= 0")
        self.cfg = cfg
        self.x = x
        self.phase = 0
        self.best: Optional[List[int]] = None
        self.sweep_sets: Optional[List[List[int]]] = None

    @property
    def period(self) -> int:
        return self.x + 1

    def reset(self, env):
        self.phase = 0
        n_t = self.cfg.n_tx_antennas
        centers = [int(round((u + 0.5) * n_t / self.cfg.n_users))
                   for u in range(self.cfg.n_users)]
        self.best = [min(max(c, 1), n_t) for c in centers]
        self.sweep_sets = None

    def propose(self, env):
        n_t = self.cfg.n_tx_antennas
        if self.phase == 0:
            requests = []
            for b in self.best:
                lo = min(max(b - 1, 1), n_t - 2)
                requests.append([lo, lo + 1, lo + 2])
            self.sweep_sets = requests
        else:
            if self.phase == 1 and self.sweep_sets is not None:
                # re-identify the best beam from the sweep slot's echo
                self.best = [cand[int(np.argmax([env.prev_bin_powers[n - 1]
                                                 for n in cand]))]
                             for cand in self.sweep_sets]
            requests = [[b] for b in self.best]
        self.phase = (self.phase + 1) % self.period
        return requests, None


class RandomPolicy(Policy):
    """Uniform single-beam allocation, disjoint across users."""

    name = "random"
    reads_observation = False

    def __init__(self, cfg: SystemConfig):
        self.cfg = cfg

    def propose(self, env):
        gen = env.policy_rng.generator
        free = list(range(1, self.cfg.n_tx_antennas + 1))
        requests = []
        for _u in range(self.cfg.n_users):
            pick = free.pop(int(gen.integers(0, len(free))))
            requests.append([pick])
        return requests, None


class FixedAllocationPolicy(Policy):
    """Static per-user beam sets, e.g. for field-of-view comparisons."""

    name = "fixed"
    reads_observation = False

    def __init__(self, beam_sets: List[List[int]]):
        self.beam_sets = [sorted(set(b)) for b in beam_sets]
        self.name = "fixed_" + "_".join(
            "-".join(str(n) for n in b) for b in self.beam_sets)

    def propose(self, env):
        return [list(b) for b in self.beam_sets], None


def make_policy(name: str, cfg: SystemConfig, x_tdma_x: int = 1) -> Policy:
    if name == "genie":
        return GeniePolicy(cfg)
    if name == "aod_based":
        return AodBasedPolicy(cfg)
    if name == "x_tdma":
        return XTdmaPolicy(cfg, x_tdma_x)
    if name == "random":
        return RandomPolicy(cfg)
    raise ValueError(f"unknown policy {name!r}")
