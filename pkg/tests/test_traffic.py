import itertools
import math

import numpy as np
import pytest

from isacsim.config import SystemConfig
from isacsim.rng import SeededRng
from isacsim.traffic import (BufferState, delay_surrogate, step_aging,
                             step_arrivals, step_service, step_tti)


def cfg_one(p_ar=0.9, b=6, d=6):
    return SystemConfig(n_users=1, arrival_probs=(p_ar,), buffer_sizes=(b,),
                        deadlines=(d,))


def test_arrival_appends_below_capacity():
    cfg = cfg_one(p_ar=1.0)
    state = BufferState.empty(cfg)
    step_arrivals(state, cfg, SeededRng(0, 1))
    assert state.buffers[0].occupancy == 1
    assert state.buffers[0].waits == [0]


def test_full_buffer_drops_arrival():
    cfg = cfg_one(p_ar=1.0, b=2)
    state = BufferState.empty(cfg)
    state.buffers[0].waits = [3, 1]
    state.buffers[0].arrived = 2
    step_arrivals(state, cfg, SeededRng(0, 1))
    assert state.buffers[0].occupancy == 2
    assert state.buffers[0].overflow_drops == 1


def test_zero_arrival_probability_no_change():
    cfg = SystemConfig(n_users=1, arrival_probs=(1e-12,), buffer_sizes=(6,),
                       deadlines=(6,))
    state = BufferState.empty(cfg)
    for _ in range(50):
        step_arrivals(state, cfg, SeededRng(0, 1))
    assert state.buffers[0].occupancy == 0


def test_service_removes_head_and_returns_wait():
    cfg = cfg_one()
    state = BufferState.empty(cfg)
    state.buffers[0].waits = [4, 2, 1]
    state.buffers[0].arrived = 3
    samples = step_service(state, [True])
    assert samples == [4]
    assert state.buffers[0].waits == [2, 1]
    assert state.buffers[0].delivered == 1


def test_service_on_empty_buffer_no_sample():
    cfg = cfg_one()
    state = BufferState.empty(cfg)
    assert step_service(state, [True]) == [None]
    assert state.buffers[0].occupancy == 0


def test_expiry_at_deadline():
    cfg = cfg_one(d=6)
    state = BufferState.empty(cfg)
    state.buffers[0].waits = [5]
    state.buffers[0].arrived = 1
    step_aging(state, [False])
    assert state.buffers[0].occupancy == 0
    assert state.buffers[0].expiry_drops == 1


def test_aging_only_on_failure():
    cfg = cfg_one()
    state = BufferState.empty(cfg)
    state.buffers[0].waits = [3, 1, 0]
    state.buffers[0].arrived = 3
    step_aging(state, [True])
    assert state.buffers[0].waits == [3, 1, 0]
    step_aging(state, [False])
    assert state.buffers[0].waits == [4, 2, 1]


def test_head_wait_is_max_and_zero_when_empty():
    cfg = cfg_one()
    state = BufferState.empty(cfg)
    assert state.head_waits[0] == 0
    state.buffers[0].waits = [4, 2]
    assert state.head_waits[0] == 4


def test_conservation_over_random_episodes():
    cfg = SystemConfig()
    state = BufferState.empty(cfg)
    rng = SeededRng(2, 3)
    succ_rng = SeededRng(3, 4)
    for _ in range(2000):
        succ = succ_rng.generator.random(2) < 0.5
        step_tti(state, succ, cfg, rng)
        assert state.conservation_ok()
        for buf in state.buffers:
            assert 0 <= buf.occupancy <= buf.capacity
            assert buf.head_wait < buf.deadline  # start-of-TTI invariant
            assert buf.waits == sorted(buf.waits, reverse=True)


def test_always_successful_service_keeps_queue_at_most_one():
    cfg = cfg_one(p_ar=1.0)
    state = BufferState.empty(cfg)
    rng = SeededRng(5, 5)
    for _ in range(200):
        assert state.buffers[0].occupancy <= 1
        step_tti(state, [True], cfg, rng)


def test_delay_surrogate_no_data_flag():
    cfg = cfg_one()
    state = BufferState.empty(cfg)
    value, has_data = delay_surrogate(state, 0)
    assert value == 0.0 and not has_data


def test_delay_surrogate_single_delivery():
    cfg = cfg_one()
    state = BufferState.empty(cfg)
    state.buffers[0].waits = [2]
    state.buffers[0].arrived = 1
    step_service(state, [True])
    value, has_data = delay_surrogate(state, 0)
    assert has_data and value == 2.0


def test_delay_surrogate_counts_drops():
    cfg = cfg_one()
    state = BufferState.empty(cfg)
    state.buffers[0].overflow_drops = 2
    state.buffers[0].expiry_drops = 1
    state.buffers[0].arrived = 3
    value, has_data = delay_surrogate(state, 0)
    assert has_data and value == 3.0


def test_surrogate_near_zero_under_reliable_service():
    cfg = cfg_one(p_ar=0.9)
    state = BufferState.empty(cfg)
    rng = SeededRng(6, 6)
    for _ in range(5000):
        step_tti(state, [True], cfg, rng)
    value, has_data = delay_surrogate(state, 0)
    assert has_data and value == 0.0


# -- exact Markov-chain oracle ------------------------------------------------------

def enumerate_chain(capacity, deadline, p_success, p_arrival):
    """Exact stationary distribution of the buffer chain.

    State: tuple of waits, head (oldest, largest) first, observed at the
    start of a TTI.  Transitions follow the canonical order: service,
    arrival, aging on failure plus deadline expiry.
    """
    def next_states(state):
        out = {}
        for success, ps in ((True, p_success), (False, 1 - p_success)):
            for arrive, pa in ((True, p_arrival), (False, 1 - p_arrival)):
                waits = list(state)
                if success and waits:
                    waits.pop(0)
                if arrive and len(waits) < capacity:
                    waits.append(0)
                if not success:
                    waits = [w + 1 for w in waits]
                    waits = [w for w in waits if w < deadline]
                key = tuple(waits)
                out[key] = out.get(key, 0.0) + ps * pa
        return out

    states = [()]
    seen = {(): 0}
    frontier = [()]
    while frontier:
        nxt = []
        for s in frontier:
            for t in next_states(s):
                if t not in seen:
                    seen[t] = len(states)
                    states.append(t)
                    nxt.append(t)
        frontier = nxt
    n = len(states)
    tm = np.zeros((n, n))
    for i, s in enumerate(states):
        for t, p in next_states(s).items():
            tm[i, seen[t]] += p
    # stationary distribution by power iteration
    pi = np.full(n, 1.0 / n)
    for _ in range(20000):
        new = pi @ tm
        if np.abs(new - pi).max() < 1e-14:
            pi = new
            break
        pi = new
    mean_q = sum(pi[i] * len(s) for i, s in enumerate(states))
    return mean_q, dict(zip(states, pi))


def test_mean_queue_matches_markov_chain():
    # B=3, D=3, success 0.8, arrivals 0.6: empirical mean occupancy over
    # 1e6 TTIs within 1% of the enumerated stationary value
    capacity, deadline, p_s, p_a = 3, 3, 0.8, 0.6
    exact, _ = enumerate_chain(capacity, deadline, p_s, p_a)
    cfg = SystemConfig(n_users=1, arrival_probs=(p_a,), buffer_sizes=(capacity,),
                       deadlines=(deadline,))
    state = BufferState.empty(cfg)
    rng = SeededRng(11, 7)
    succ_gen = SeededRng(12, 8).generator
    n = 1_000_000
    total = 0
    succ = succ_gen.random(n) < p_s
    for i in range(n):
        total += state.buffers[0].occupancy
        step_tti(state, [succ[i]], cfg, rng)
    empirical = total / n
    assert exact > 0.1
    assert abs(empirical - exact) / exact < 0.01
