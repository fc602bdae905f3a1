"""Per-user finite buffers with Bernoulli arrivals, deadlines and drop
accounting.

TTI ordering: service of the head-of-line packet first, then arrivals,
then aging (waits +1 on a failed transmission) and deadline expiry.  A
packet's wait therefore counts the transmission failures it has sat
through, and arrivals never ride along with the same TTI's service.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .config import SystemConfig
from .rng import SeededRng


@dataclass
class UserBuffer:
    capacity: int
    deadline: int
    waits: List[int] = field(default_factory=list)  # head first (oldest)
    arrived: int = 0
    delivered: int = 0
    overflow_drops: int = 0
    expiry_drops: int = 0
    delivered_wait_sum: int = 0

    @property
    def occupancy(self) -> int:
        return len(self.waits)

    @property
    def head_wait(self) -> int:
        """Longest waiting time in the buffer; 0 when empty."""
        return self.waits[0] if self.waits else 0


@dataclass
class BufferState:
    buffers: List[UserBuffer]

    @classmethod
    def empty(cls, cfg: SystemConfig) -> "BufferState":
        return cls([UserBuffer(capacity=b, deadline=d)
                    for b, d in zip(cfg.buffer_sizes, cfg.deadlines)])

    @property
    def occupancies(self) -> np.ndarray:
        return np.array([b.occupancy for b in self.buffers])

    @property
    def head_waits(self) -> np.ndarray:
        return np.array([b.head_wait for b in self.buffers])

    def conservation_ok(self) -> bool:
        return all(b.arrived == b.delivered + b.overflow_drops + b.expiry_drops
                   + b.occupancy for b in self.buffers)


def step_service(state: BufferState, successes: Sequence[bool]) -> List[Optional[int]]:
    """Remove the head packet of each successful user.

    Returns the delay sample (the delivered packet's wait) per user, or
    None when nothing was delivered (failure, or an empty buffer: the
    max(q - mu, 0) clamp).
    """
    samples: List[Optional[int]] = []
    for buf, ok in zip(state.buffers, successes):
        if ok and buf.waits:
            w = buf.waits.pop(0)
            buf.delivered += 1
            buf.delivered_wait_sum += w
            samples.append(w)
        else:
            samples.append(None)
    return samples


def step_arrivals(state: BufferState, cfg: SystemConfig, rng: SeededRng) -> np.ndarray:
    """Bernoulli arrivals; a packet joining a full buffer is dropped."""
    draws = rng.generator.random(len(state.buffers))
    arrived = np.zeros(len(state.buffers), dtype=bool)
    for u, buf in enumerate(state.buffers):
        if draws[u] < cfg.arrival_probs[u]:
            buf.arrived += 1
            arrived[u] = True
            if buf.occupancy < buf.capacity:
                buf.waits.append(0)
            else:
                buf.overflow_drops += 1
    return arrived


def step_aging(state: BufferState, successes: Sequence[bool]) -> np.ndarray:
    """On a failed TTI all waits grow by one; packets hitting the deadline
    are dropped.  Returns the per-user expiry count for this TTI."""
    expired = np.zeros(len(state.buffers), dtype=int)
    for u, (buf, ok) in enumerate(zip(state.buffers, successes)):
        if not ok:
            buf.waits = [w + 1 for w in buf.waits]
            kept = [w for w in buf.waits if w < buf.deadline]
            n_exp = len(buf.waits) - len(kept)
            if n_exp:
                buf.expiry_drops += n_exp
                expired[u] = n_exp
            buf.waits = kept
    return expired


@dataclass
class TtiTrafficOutcome:
    delivered_waits: List[Optional[int]]
    arrived: np.ndarray
    overflowed: np.ndarray
    expired: np.ndarray


def step_tti(state: BufferState, successes: Sequence[bool], cfg: SystemConfig,
             rng: SeededRng) -> TtiTrafficOutcome:
    """One TTI of queue dynamics in the canonical order."""
    before_overflow = np.array([b.overflow_drops for b in state.buffers])
    samples = step_service(state, successes)
    arrived = step_arrivals(state, cfg, rng)
    expired = step_aging(state, successes)
    overflowed = np.array([b.overflow_drops for b in state.buffers]) - before_overflow
    return TtiTrafficOutcome(samples, arrived, overflowed > 0, expired)


def delay_surrogate(state: BufferState, user: int) -> tuple:
    """Online delay surrogate: mean delivered wait plus one unit per drop.

    Returns (value, has_data); zero with has_data=False when no packet was
    delivered or dropped yet.
    """
    buf = state.buffers[user]
    drops = buf.overflow_drops + buf.expiry_drops
    if buf.delivered == 0 and drops == 0:
        return 0.0, False
    mean_wait = buf.delivered_wait_sum / buf.delivered if buf.delivered else 0.0
    return mean_wait + drops, True
