"""Per-TTI environment loop.

Builds the observation (previous TTI's per-bin echo powers, previous
allocation, buffer states), decodes the incremental beam actions, resolves
collisions by buffer priority, runs power allocation / PHY / sensing /
traffic, and emits the cross-layer reward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from . import rng as streams
from .config import SystemConfig, derived_resolutions
from .phy import (BeamAllocation, alpha_gain, beam_weights, bin_center_angle,
                  build_codebook, steering)
from .power import PowerAllocation, allocate
from .rng import SeededRng
from .sensing import (Scatterer, clutter_scatterers, process_tti_echo,
                      synthesize_echo_snapshots, user_scatterers, _QPSK_TABLE)
from .traffic import BufferState, step_tti
from .world import WorldState, init_world

FULL_ACTION_SET = (1, 2, 3, 4, 5, 6)
SINGLE_BEAM_ACTION_SET = (1, 4, 6)

_MUSIC_DECIMATION = 8


@dataclass
class MdpSnapshot:
    """One TTI of the MDP: Eq.-style observation, action, reward, done."""

    observation: np.ndarray
    action: Optional[int]
    reward: float
    done: bool
    info: dict


class ObsNormalizer:
    """Running mean/std shared across the angular-bin power entries."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.frozen = False

    def update(self, values: np.ndarray) -> None:
        if self.frozen:
            return
        for v in np.asarray(values, dtype=float).ravel():
            self.count += 1
            delta = v - self.mean
            self.mean += delta / self.count
            self.m2 += delta * (v - self.mean)

    def normalize(self, values: np.ndarray) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(np.asarray(values, dtype=float))
        std = math.sqrt(self.m2 / (self.count - 1))
        if std <= 0:
            return np.zeros_like(np.asarray(values, dtype=float))
        return (np.asarray(values, dtype=float) - self.mean) / std

    def state_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean, "m2": self.m2}

    def load_state_dict(self, state: dict) -> None:
        self.count = int(state["count"])
        self.mean = float(state["mean"])
        self.m2 = float(state["m2"])


# -- action decoding and collision resolution -----------------------------------

def decode_action(action: int, prev_alloc: BeamAllocation,
                  prev_bin_powers: np.ndarray, n_antennas: int,
                  action_set: Sequence[int] = FULL_ACTION_SET) -> List[List[int]]:
    """Per-user requested beam sets from the base-|action_set| integer.

    User u's digit selects: 1 keep, 2 shrink to the strongest current beam,
    3 sweep low, 4 step low, 5 sweep high, 6 step high.  Indices clamp to
    [1, N_T]; user 0 owns the least-significant digit.
    """
    n_users = prev_alloc.n_users
    base = len(action_set)
    if not 0 <= action < base ** n_users:
        raise ValueError(f"action {action} outside [0, {base ** n_users})")
    requests = []
    rem = action
    for u in range(n_users):
        code = action_set[rem % base]
        rem //= base
        current = list(prev_alloc.beams[u])
        lo, hi = min(current), max(current)
        if code == 1:
            req = current
        elif code == 2:
            powers = [prev_bin_powers[n_a - 1] for n_a in current]
            req = [current[int(np.argmax(powers))]]
        elif code == 3:
            req = [lo - 2, lo - 1, lo]
        elif code == 4:
            req = [lo - 1]
        elif code == 5:
            req = [hi, hi + 1, hi + 2]
        elif code == 6:
            req = [hi + 1]
        else:
            raise ValueError(f"unknown action code {code}")
        req = sorted({min(max(n_a, 1), n_antennas) for n_a in req})
        requests.append(req)
    return requests


def resolve_collisions(requests: Sequence[Sequence[int]], occupancies: Sequence[int],
                       head_waits: Sequence[int], n_antennas: int) -> BeamAllocation:
    """Disjoint allocation honoring buffer priority.

    Users are served fullest-buffer first (ties: larger head-of-line wait,
    then lower user id).  A lower-priority user's conflicting index moves to
    the nearest free index, smaller index on distance ties.
    """
    n_users = len(requests)
    if 3 * n_users > n_antennas:
        raise ValueError("cannot guarantee collision-free allocation: 3U > N_T")
    order = sorted(range(n_users),
                   key=lambda u: (-occupancies[u], -head_waits[u], u))
    taken = set()
    assigned: List[List[int]] = [[] for _ in range(n_users)]
    for u in order:
        for n_a in requests[u]:
            if n_a not in taken:
                taken.add(n_a)
                assigned[u].append(n_a)
            else:
                moved = _nearest_free(n_a, taken, n_antennas)
                taken.add(moved)
                assigned[u].append(moved)
    return BeamAllocation(beams=tuple(tuple(sorted(a)) for a in assigned),
                          n_antennas=n_antennas)


def _nearest_free(n_a: int, taken: set, n_antennas: int) -> int:
    for dist in range(1, n_antennas):
        for cand in (n_a - dist, n_a + dist):  # smaller index wins ties
            if 1 <= cand <= n_antennas and cand not in taken:
                return cand
    raise ValueError("codebook exhausted")


def reward_terms(deadline: int, delta: int, overflow: bool, expiry: bool,
                 eps_d: float, eps_v: float, log_base: float,
                 error_floor: float) -> float:
    """One user's reward: (D - delta) minus unit drop penalties plus
    log_base-logs of the normalized estimation errors (floored)."""
    log_b = math.log(log_base)
    eps_d = max(float(eps_d), error_floor)
    eps_v = max(float(eps_v), error_floor)
    return (deadline - delta - float(overflow) - float(expiry)
            + math.log(eps_d) / log_b + math.log(eps_v) / log_b)


def warmup_allocation(cfg: SystemConfig, beams_per_user: int = 3) -> BeamAllocation:
    """TTI-0 allocation: per-user beams centered on a uniform spread."""
    n_t, n_u = cfg.n_tx_antennas, cfg.n_users
    sets = []
    for u in range(n_u):
        center = int(round((u + 0.5) * n_t / n_u))
        center = min(max(center, 2), n_t - 1)
        if beams_per_user >= 3:
            sets.append((center - 1, center, center + 1))
        else:
            sets.append((center,))
    return BeamAllocation(beams=tuple(sets), n_antennas=n_t)


# -- the environment -------------------------------------------------------------

class BeamSchedulingEnv:
    """Sequential single-instance environment; one TTI per step."""

    def __init__(self, cfg: SystemConfig, seed: int, train_pool: bool = False,
                 variant: str = "mb", collect_music: bool = False,
                 normalizer: Optional[ObsNormalizer] = None,
                 build_observation: bool = True):
        self.cfg = cfg
        self.seed = int(seed)
        self.train_pool = train_pool
        self.variant = variant
        self.collect_music = collect_music
        # fixed-allocation policies never read the observation; skipping the
        # idle-bin statistics roughly halves the eval cost
        self.build_observation = build_observation
        self.codebook = build_codebook(cfg.n_tx_antennas)
        self.action_set = FULL_ACTION_SET if variant == "mb" else SINGLE_BEAM_ACTION_SET
        self.n_actions = len(self.action_set) ** cfg.n_users
        self.obs_dim = 2 * cfg.n_tx_antennas + 2 * cfg.n_users
        self.normalizer = normalizer if normalizer is not None else ObsNormalizer()
        self._episode = -1
        self._pick_rng = SeededRng(self.seed, streams.STREAM_EVAL)
        self.world: Optional[WorldState] = None

    # -- episode lifecycle ------------------------------------------------------

    def reset(self, position_set_id: Optional[int] = None) -> np.ndarray:
        self._episode += 1
        ep = self._episode
        cfg = self.cfg
        self._world_rng = SeededRng(self.seed, streams.STREAM_WORLD).substream(ep)
        self._traffic_rng = SeededRng(self.seed, streams.STREAM_TRAFFIC).substream(ep)
        self._channel_rng = SeededRng(self.seed, streams.STREAM_CHANNEL).substream(ep)
        self._noise_rng = SeededRng(self.seed, streams.STREAM_ECHO_NOISE).substream(ep)
        self._symbol_rng = SeededRng(self.seed, streams.STREAM_SYMBOLS).substream(ep)
        self._phase_rng = SeededRng(self.seed, streams.STREAM_SCATTER_PHASE).substream(ep)
        self.policy_rng = SeededRng(self.seed, streams.STREAM_POLICY).substream(ep)
        if position_set_id is None:
            position_set_id = int(self._pick_rng.generator.integers(0, cfg.n_position_sets))
        self.position_set_id = position_set_id
        self.world = init_world(cfg, self._world_rng, position_set_id,
                                train_pool=self.train_pool)
        self.buffers = BufferState.empty(cfg)
        self.tti = 0
        self.prev_alloc = warmup_allocation(cfg, 3 if self.variant == "mb" else 1)
        self.prev_bin_powers = np.zeros(cfg.n_tx_antennas)
        self.prev_estimates = None  # (d_hat, chosen_bins, snr_hat)
        self.prev_music_snapshots = None
        self.last_outcome = None
        # warm-up TTI: run the physics once so the first observation carries
        # a real echo; no reward is logged and the TTI counter stays at 0.
        self._run_tti(self.prev_alloc, aod_hints=None, warmup=True)
        return self._build_obs()

    # -- observation ------------------------------------------------------------

    def _obs_power_features(self) -> np.ndarray:
        if self.cfg.obs_power_transform == "log":
            floor = 1e-3 * self.cfg.noise_power_w
            return np.log10(np.maximum(self.prev_bin_powers, floor)
                            / self.cfg.noise_power_w)
        return self.prev_bin_powers

    def _build_obs(self) -> np.ndarray:
        cfg = self.cfg
        if not self.build_observation:
            return np.zeros(self.obs_dim)
        features = self._obs_power_features()
        self.normalizer.update(features)
        binp = self.normalizer.normalize(features)
        vbar = np.zeros(cfg.n_tx_antennas)
        for u, beams in enumerate(self.prev_alloc.beams):
            for n_a in beams:
                vbar[n_a - 1] = u + 1
        delta = self.buffers.head_waits / np.asarray(cfg.deadlines, dtype=float)
        occ = self.buffers.occupancies / np.asarray(cfg.buffer_sizes, dtype=float)
        return np.concatenate([binp, vbar, delta, occ])

    # -- core TTI ---------------------------------------------------------------

    def _power_allocation(self, alloc: BeamAllocation, weights: np.ndarray,
                          aod_hints: Optional[np.ndarray]) -> PowerAllocation:
        cfg = self.cfg
        n_u = cfg.n_users
        budget = cfg.tx_power_w
        if self.prev_estimates is None:
            powers = np.full((n_u, cfg.n_subcarriers), budget / n_u)
            return PowerAllocation(powers=powers,
                                   feasible=np.zeros(cfg.n_subcarriers, dtype=bool),
                                   predicted_failure=np.zeros(n_u, dtype=bool))
        d_hat, chosen_bins, _ = self.prev_estimates
        range_res, _ = derived_resolutions(cfg)
        # conservative gains: assume the far edge of the estimated range bin
        # and the worst angle within half a beamwidth, so a feasible solve
        # over-provisions instead of missing the target on quantized estimates
        d_use = np.maximum(d_hat + 0.5 * range_res, 1.0)
        if aod_hints is not None:
            aods = np.asarray(aod_hints, dtype=float)
        else:
            aods = np.array([bin_center_angle(b, cfg.n_tx_antennas)
                             for b in chosen_bins])
        half_bin = math.pi / cfg.n_tx_antennas
        direct = np.zeros(n_u)
        cross = np.zeros((n_u, n_u))
        for u in range(n_u):
            a = steering(aods[u], cfg.n_tx_antennas)
            amp2 = alpha_gain(d_use[u], cfg.wavelength_m) ** 2
            proj2 = np.abs(np.conj(a) @ weights) ** 2
            own_candidates = [proj2[u]]
            for off in (-half_bin, half_bin):
                a_off = steering(aods[u] + off, cfg.n_tx_antennas)
                own_candidates.append(abs(np.conj(a_off) @ weights[:, u]) ** 2)
            cross[u] = amp2 * proj2
            direct[u] = amp2 * min(own_candidates)
        per_sample = cfg.frames_per_tti * cfg.samples_per_frame
        target = 2.0 ** (cfg.rate_threshold / per_sample) - 1.0
        targets = np.full(n_u, target)
        return allocate(direct, cross, targets, cfg.noise_power_w, budget,
                        cfg.n_subcarriers)

    def _comm_rates(self, geo, weights: np.ndarray, powers_col: np.ndarray) -> np.ndarray:
        """Per-frame per-user rates, (M, U)."""
        cfg = self.cfg
        n_u = cfg.n_users
        grid = cfg.samples_per_frame
        sigma2 = cfg.noise_power_w
        amps = alpha_gain(geo.user_distances, cfg.wavelength_m)
        proj = np.empty((n_u, n_u))
        for u in range(n_u):
            a = steering(geo.user_aods[u], cfg.n_tx_antennas)
            proj[u] = np.abs(np.conj(a) @ weights) ** 2
        if cfg.scenario == "clean":
            rates = np.empty(n_u)
            for u in range(n_u):
                pw = amps[u] ** 2 * proj[u] * powers_col
                own = pw[u]
                rates[u] = grid * math.log2(1.0 + own / (pw.sum() - own + sigma2))
            return np.tile(rates, (cfg.frames_per_tti, 1))
        k = cfg.rician_k
        w_los = math.sqrt(k / (1.0 + k))
        s_nlos = np.sqrt(1.0 / (1.0 + k)) * amps / math.sqrt(cfg.n_tx_antennas)
        gen = self._channel_rng.generator
        out = np.empty((cfg.frames_per_tti, n_u))
        for m in range(cfg.frames_per_tti):
            for u in range(n_u):
                mu = w_los * amps[u] * np.sqrt(proj[u])          # (U,)
                eta = gen.standard_normal((n_u, grid, 2),
                                          dtype=np.float32).view(np.complex64)[..., 0]
                h2 = np.abs(mu[:, None] + s_nlos[u] * eta) ** 2  # (U, grid)
                pw = h2 * powers_col[:, None]
                own = pw[u]
                interf = pw.sum(axis=0) - own
                out[m, u] = float(np.log2(1.0 + own / (interf + sigma2)).sum())
        return out

    def _run_tti(self, alloc: BeamAllocation, aod_hints: Optional[np.ndarray],
                 warmup: bool = False) -> Optional[dict]:
        cfg = self.cfg
        geo = self.world.geometry()
        weights = beam_weights(alloc, self.codebook)
        palloc = self._power_allocation(alloc, weights, aod_hints)
        powers_col = palloc.powers[:, 0]

        rates = self._comm_rates(geo, weights, powers_col)
        successes = rates.sum(axis=0) >= cfg.rate_threshold

        scat = user_scatterers(self.world, cfg, self._phase_rng)
        if cfg.scenario == "cluttered":
            scat = scat + clutter_scatterers(self.world)
        qpsk = _QPSK_TABLE[self._symbol_rng.generator.integers(
            0, 4, size=(cfg.n_users, cfg.n_subcarriers, cfg.n_symbols),
            dtype=np.uint8)]
        outcome = process_tti_echo(
            scat, weights, powers_col, alloc, cfg,
            self._symbol_rng, self._noise_rng,
            truth=(geo.user_distances, geo.user_radial_speeds),
            codebook=self.codebook, qpsk=qpsk,
            idle_bins=self.build_observation)

        if self.collect_music:
            sub = np.arange(0, cfg.n_subcarriers, _MUSIC_DECIMATION)
            sym = np.arange(0, cfg.n_symbols, _MUSIC_DECIMATION)
            symbols = np.sqrt(np.maximum(powers_col, 0.0))[:, None, None] * qpsk
            self.prev_music_snapshots = synthesize_echo_snapshots(
                scat, weights, symbols, cfg, sub, sym, noise_rng=self._noise_rng)

        traffic_out = step_tti(self.buffers, successes, cfg, self._traffic_rng)

        self.prev_alloc = alloc
        self.prev_bin_powers = outcome.bin_powers
        self.prev_estimates = (outcome.range_estimates, outcome.chosen_bins,
                               outcome.echo_snr_estimates)
        self.last_outcome = outcome
        self.world.advance(self._world_rng, cfg.tti_duration_s)

        if warmup:
            return None
        return {
            "successes": successes,
            "rates": rates,
            "power": palloc,
            "traffic": traffic_out,
            "sensing": outcome,
            "geometry": geo,
            "allocation": alloc,
        }

    def step(self, action: Optional[int] = None,
             allocation: Optional[BeamAllocation] = None,
             aod_hints: Optional[np.ndarray] = None) -> MdpSnapshot:
        """Advance one TTI, either from an encoded action or a direct
        allocation (baseline policies)."""
        cfg = self.cfg
        if allocation is None:
            if action is None:
                raise ValueError("need an action or an allocation")
            requests = decode_action(action, self.prev_alloc, self.prev_bin_powers,
                                     cfg.n_tx_antennas, self.action_set)
            allocation = resolve_collisions(requests, self.buffers.occupancies,
                                            self.buffers.head_waits,
                                            cfg.n_tx_antennas)
        info = self._run_tti(allocation, aod_hints)
        self.tti += 1
        done = self.tti >= cfg.ttis_per_episode

        delta = self.buffers.head_waits
        outcome = info["sensing"]
        tr = info["traffic"]
        reward = 0.0
        comps = []
        for u in range(cfg.n_users):
            comp = {"deadline": cfg.deadlines[u], "delta": int(delta[u]),
                    "overflow": bool(tr.overflowed[u]),
                    "expiry": bool(tr.expired[u] > 0),
                    "eps_d": float(outcome.eps_d[u]),
                    "eps_v": float(outcome.eps_v[u])}
            comps.append(comp)
            reward += reward_terms(comp["deadline"], comp["delta"],
                                   comp["overflow"], comp["expiry"],
                                   comp["eps_d"], comp["eps_v"],
                                   cfg.reward_log_base, cfg.error_floor)
        info["reward_components"] = comps
        info["delivered_waits"] = tr.delivered_waits
        obs = self._build_obs()
        return MdpSnapshot(observation=obs, action=action, reward=reward,
                           done=done, info=info)
