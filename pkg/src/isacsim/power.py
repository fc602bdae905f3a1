"""Minimum-power allocation meeting per-user SINR targets.

Solves the coupled power-control fixed point p_u = target_u * (noise +
sum_q g_uq p_q) / g_uu per subcarrier.  When the fixed point does not
exist within the per-subcarrier budget, the budget is split evenly among
the users on that subcarrier and users still short of their target are
flagged as predicted failures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_ITERS = 1000
TOL = 1e-10


@dataclass
class PowerAllocation:
    """Per-user per-subcarrier transmit powers (linear watts)."""

    powers: np.ndarray            # (U, Nc)
    feasible: np.ndarray          # (Nc,) bool
    predicted_failure: np.ndarray  # (U,) bool

    def total(self) -> float:
        return float(self.powers.sum())


def solve_fixed_point(direct: np.ndarray, cross: np.ndarray, targets: np.ndarray,
                      noise: float) -> tuple:
    """Iterate the coupled SINR system to its minimal fixed point.

    direct: (U,) own-channel gains; cross: (U, U) with cross[u, q] the gain
    of user q's beam at user u's channel (diagonal ignored).  Returns
    (powers, converged).  Users with zero own-gain are excluded and get
    power 0.
    """
    u_n = len(direct)
    active = direct > 0.0
    p = np.zeros(u_n)
    if not np.any(active):
        return p, False
    for _ in range(MAX_ITERS):
        interference = cross @ p - np.diag(cross) * p
        new_p = np.where(active, targets * (noise + interference)
                         / np.where(active, direct, 1.0), 0.0)
        if not np.all(np.isfinite(new_p)) or new_p.max() > 1e12:
            return new_p, False  # diverging: spectral radius >= 1
        if np.abs(new_p - p).max() <= TOL * max(new_p.max(), 1e-300):
            return new_p, True
        p = new_p
    return p, False


def achieved_sinr(powers: np.ndarray, direct: np.ndarray, cross: np.ndarray,
                  noise: float) -> np.ndarray:
    interference = cross @ powers - np.diag(cross) * powers
    return direct * powers / (interference + noise)


def allocate(direct: np.ndarray, cross: np.ndarray, targets: np.ndarray,
             noise: float, budget_per_subcarrier: float,
             n_subcarriers: int) -> PowerAllocation:
    """Allocate per-subcarrier powers for identical gains on every subcarrier.

    The per-subcarrier problem is the same across subcarriers here (targets
    and estimated gains are frequency-flat), so one solve populates the
    whole (U, Nc) table.
    """
    direct = np.asarray(direct, dtype=float)
    cross = np.asarray(cross, dtype=float)
    targets = np.asarray(targets, dtype=float)
    u_n = len(direct)
    active = direct > 0.0

    p, converged = solve_fixed_point(direct, cross, targets, noise)
    feasible = bool(converged and p.sum() <= budget_per_subcarrier + 1e-18)
    if feasible:
        powers_col = p
        predicted_failure = ~active
    else:
        powers_col = np.full(u_n, budget_per_subcarrier / u_n)
        got = achieved_sinr(powers_col, np.where(active, direct, 0.0), cross, noise)
        predicted_failure = got < targets
    powers = np.repeat(powers_col[:, None], n_subcarriers, axis=1)
    return PowerAllocation(
        powers=powers,
        feasible=np.full(n_subcarriers, feasible),
        predicted_failure=predicted_failure)
