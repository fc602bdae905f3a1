"""Physical layer: steering vectors, DFT codebook, Rician channels, SINR,
per-frame rate and the TTI-level transmission success rule.

Beam (angular-bin) indices are 1-based throughout, matching the codeword
numbering n_a = 1..N_T with center angle w(n_a) = pi (2 n_a - 1 - N_T)/N_T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import SPEED_OF_LIGHT, SystemConfig
from .rng import SeededRng


def steering(normalized_angle: float, n_antennas: int) -> np.ndarray:
    """Unit-norm ULA steering vector, entry k = exp(j k theta)/sqrt(N)."""
    if n_antennas < 1:
        raise ValueError("n_antennas must be >= 1")
    k = np.arange(n_antennas)
    return np.exp(1j * k * normalized_angle) / math.sqrt(n_antennas)


def bin_center_angle(n_a: int, n_antennas: int) -> float:
    """Center angle (normalized) of codebook bin n_a in 1..N_T."""
    return math.pi * (2 * n_a - 1 - n_antennas) / n_antennas


def build_codebook(n_antennas: int) -> np.ndarray:
    """DFT codebook, one unit-norm codeword per column; F^H F = I."""
    cols = [steering(bin_center_angle(n_a, n_antennas), n_antennas)
            for n_a in range(1, n_antennas + 1)]
    return np.stack(cols, axis=1)


def angle_to_bin(normalized_angle: float, n_antennas: int) -> int:
    """Bin (1-based) whose center is closest to the angle, wrapping at +-pi."""
    best, best_dist = 1, float("inf")
    for n_a in range(1, n_antennas + 1):
        delta = normalized_angle - bin_center_angle(n_a, n_antennas)
        dist = abs(math.remainder(delta, 2 * math.pi))
        if dist < best_dist:
            best, best_dist = n_a, dist
    return best


# -- beam allocation ----------------------------------------------------------

MAX_BEAMS_PER_USER = 3


@dataclass(frozen=True)
class BeamAllocation:
    """Per-user sorted sets of codebook indices; disjoint, 1..3 beams each."""

    beams: tuple  # tuple of per-user tuples of ints in [1, N_T]
    n_antennas: int

    def __post_init__(self):
        seen = set()
        for u, c in enumerate(self.beams):
            if not 1 <= len(c) <= MAX_BEAMS_PER_USER:
                raise ValueError(f"user {u}: {len(c)} beams (must be 1..3)")
            if list(c) != sorted(set(c)):
                raise ValueError(f"user {u}: beams must be sorted and unique")
            for n_a in c:
                if not 1 <= n_a <= self.n_antennas:
                    raise ValueError(f"user {u}: beam {n_a} out of range")
                if n_a in seen:
                    raise ValueError(f"beam {n_a} allocated twice")
                seen.add(n_a)

    @property
    def n_users(self) -> int:
        return len(self.beams)

    def user_of_beam(self, n_a: int) -> int:
        """0-based owner of a beam, or -1 if idle."""
        for u, c in enumerate(self.beams):
            if n_a in c:
                return u
        return -1


def beam_weights(alloc: BeamAllocation, codebook: np.ndarray) -> np.ndarray:
    """Per-user combined transmit vector w_u = F v_u, shape (N_T, U).

    The selection weights have magnitude 1/sqrt(#beams) per active beam so
    the radiated power is independent of the allocation size; each w_u has
    unit norm by codebook orthonormality.  Each codeword is phased to the
    array center (factor exp(-j (N-1) w(n_a) / 2)) so adjacent beams add
    coherently across the multi-beam field of view instead of leaving
    ripple nulls between bin centers.
    """
    n_t = codebook.shape[0]
    w = np.zeros((n_t, alloc.n_users), dtype=complex)
    for u, c in enumerate(alloc.beams):
        scale = 1.0 / math.sqrt(len(c))
        for n_a in c:
            center_phase = np.exp(-0.5j * (n_t - 1) * bin_center_angle(n_a, n_t))
            w[:, u] += scale * center_phase * codebook[:, n_a - 1]
    return w


# -- channels -----------------------------------------------------------------

@dataclass
class ChannelRealization:
    """One OFDM frame of per-user downlink responses.

    The LoS component is stored in closed form (gain, delay/Doppler phase
    ramps, steering vector); the NLoS component is an explicit i.i.d.
    complex-Gaussian tensor scaled so its mean power matches |alpha(d)|^2,
    leaving the Rician K-factor as the only LoS/NLoS weighting.
    """

    distances: np.ndarray          # (U,)
    radial_speeds: np.ndarray      # (U,)
    aods: np.ndarray               # (U,) normalized angles
    gains: np.ndarray              # (U,) complex alpha(d) incl. phase
    rician_k: float                # linear; inf = pure LoS
    n_antennas: int
    n_subcarriers: int
    n_symbols: int
    subcarrier_spacing_hz: float
    symbol_duration_s: float
    carrier_freq_hz: float
    nlos: Optional[np.ndarray] = None  # (U, N_T, Nc, Ns), already alpha-scaled

    def los_phase_ramps(self, user: int) -> tuple:
        """(delay ramp over subcarriers, Doppler ramp over symbols)."""
        i = np.arange(self.n_subcarriers)
        l = np.arange(self.n_symbols)
        delay = np.exp(1j * 2 * np.pi * i * self.subcarrier_spacing_hz
                       * self.distances[user] / SPEED_OF_LIGHT)
        doppler = np.exp(1j * 2 * np.pi * l * self.symbol_duration_s
                         * self.radial_speeds[user] * self.carrier_freq_hz
                         / SPEED_OF_LIGHT)
        return delay, doppler

    def los_response(self, user: int, subcarrier: int, symbol: int) -> np.ndarray:
        a = steering(self.aods[user], self.n_antennas)
        delay, doppler = self.los_phase_ramps(user)
        return self.gains[user] * delay[subcarrier] * doppler[symbol] * a

    def response(self, user: int, subcarrier: int, symbol: int) -> np.ndarray:
        """h_i^u[l], mixing LoS and NLoS by the Rician K-factor."""
        los = self.los_response(user, subcarrier, symbol)
        if math.isinf(self.rician_k):
            return los
        w_los = math.sqrt(self.rician_k / (1.0 + self.rician_k))
        w_nlos = math.sqrt(1.0 / (1.0 + self.rician_k))
        return w_los * los + w_nlos * self.nlos[user, :, subcarrier, symbol]

    def beam_projections(self, weights: np.ndarray) -> np.ndarray:
        """h^H w for every (user, beam column, subcarrier, symbol).

        Returns (U, Q, Nc, Ns) complex with Q = weights.shape[1].
        """
        n_u = len(self.distances)
        q = weights.shape[1]
        out = np.empty((n_u, q, self.n_subcarriers, self.n_symbols), dtype=complex)
        for u in range(n_u):
            a = steering(self.aods[u], self.n_antennas)
            proj = np.conj(self.gains[u]) * (np.conj(a) @ weights)  # (Q,)
            delay, doppler = self.los_phase_ramps(u)
            ramp = np.conj(delay)[:, None] * np.conj(doppler)[None, :]
            los = proj[:, None, None] * ramp[None, :, :]
            if math.isinf(self.rician_k):
                out[u] = los
            else:
                w_los = math.sqrt(self.rician_k / (1.0 + self.rician_k))
                w_nlos = math.sqrt(1.0 / (1.0 + self.rician_k))
                nl = np.einsum("aij,aq->qij", np.conj(self.nlos[u]), weights)
                out[u] = w_los * los + w_nlos * nl
        return out


def alpha_gain(distance: float, wavelength: float) -> float:
    """Free-space amplitude |alpha(d)| = lambda/(4 pi d)."""
    return wavelength / (4.0 * math.pi * distance)


def draw_channel(world, cfg: SystemConfig, rng: SeededRng,
                 gain_phases: Optional[np.ndarray] = None) -> ChannelRealization:
    """Draw one frame's channel realization for all users.

    The clutter-free scenario is pure LoS (K -> inf); the cluttered one is
    Rician with the configured K.  `gain_phases` lets the caller pin the
    per-TTI alpha phases so all frames of a TTI share them.
    """
    geo = world.geometry()
    dists = geo.user_distances
    if np.any(dists <= 0):
        raise ValueError("user distances must be positive")
    gen = rng.generator
    if gain_phases is None:
        gain_phases = gen.uniform(0.0, 2 * np.pi, size=len(dists))
    gains = alpha_gain(dists, cfg.wavelength_m) * np.exp(1j * gain_phases)
    k = math.inf if cfg.scenario == "clean" else cfg.rician_k
    nlos = None
    if not math.isinf(k):
        shape = (len(dists), cfg.n_tx_antennas, cfg.n_subcarriers, cfg.n_symbols)
        raw = gen.standard_normal(shape) + 1j * gen.standard_normal(shape)
        # per-entry variance |alpha|^2 / N_T so E||h_nlos||^2 = |alpha|^2
        scale = np.abs(gains) / math.sqrt(2.0 * cfg.n_tx_antennas)
        nlos = raw * scale[:, None, None, None]
    return ChannelRealization(
        distances=dists, radial_speeds=geo.user_radial_speeds, aods=geo.user_aods,
        gains=gains, rician_k=k, n_antennas=cfg.n_tx_antennas,
        n_subcarriers=cfg.n_subcarriers, n_symbols=cfg.n_symbols,
        subcarrier_spacing_hz=cfg.subcarrier_spacing_hz,
        symbol_duration_s=cfg.symbol_duration_s,
        carrier_freq_hz=cfg.carrier_freq_hz, nlos=nlos)


# -- SINR / rate / success ----------------------------------------------------

def user_sinr(channel: ChannelRealization, alloc: BeamAllocation,
              powers, subcarrier: int, symbol: int, user: int,
              noise_power_w: float, codebook: Optional[np.ndarray] = None) -> float:
    """Per-(subcarrier, symbol) SINR of one user.

    Own beamformed power over the other users' beamformed power at this
    user's channel plus noise.  `powers` is the (U, Nc) power table.
    """
    if codebook is None:
        codebook = build_codebook(alloc.n_antennas)
    w = beam_weights(alloc, codebook)
    h = channel.response(user, subcarrier, symbol)
    p = np.asarray(powers)
    num = p[user, subcarrier] * abs(np.vdot(h, w[:, user])) ** 2
    interference = 0.0
    for q in range(alloc.n_users):
        if q != user:
            interference += p[q, subcarrier] * abs(np.vdot(h, w[:, q])) ** 2
    return num / (interference + noise_power_w)


def rate(channels: ChannelRealization, alloc: BeamAllocation, powers,
         noise_power_w: float, codebook: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-user frame rate R_u = sum_{i,l} log2(1 + sinr_il), vectorized."""
    if codebook is None:
        codebook = build_codebook(alloc.n_antennas)
    w = beam_weights(alloc, codebook)
    proj = channels.beam_projections(w)          # (U, U, Nc, Ns)
    p = np.asarray(powers, dtype=float)          # (U, Nc)
    pw = np.abs(proj) ** 2 * p[None, :, :, None]
    n_u = alloc.n_users
    rates = np.empty(n_u)
    for u in range(n_u):
        own = pw[u, u]
        interference = pw[u].sum(axis=0) - own
        rates[u] = np.log2(1.0 + own / (interference + noise_power_w)).sum()
    return rates


def transmission_success(rates_over_frames: Sequence[float], r_th: float) -> bool:
    """A TTI's packet goes through iff the per-frame rates sum to >= r_th."""
    return float(np.sum(rates_over_frames)) >= r_th


def qpsk_symbols(rng: SeededRng, shape, power: float = 1.0) -> np.ndarray:
    """Gray-less QPSK symbols with |s|^2 = power (constant modulus)."""
    idx = rng.generator.integers(0, 4, size=shape)
    return math.sqrt(power) * np.exp(1j * (np.pi / 4 + np.pi / 2 * idx))
