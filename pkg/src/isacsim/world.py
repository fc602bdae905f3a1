"""Scenario geometry and user mobility.

A 100 m x 100 m area with a road grid (two horizontal plus two vertical
roads at thirds of each dimension, giving four interior intersections).
Users drive along roads, turning at intersections to any of the other
three directions with probability 1/3 each; area edges force a U-turn.
Four stationary clutters sit at fixed polar offsets from the BS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .config import SystemConfig
from .rng import SeededRng
from .sensing import reflection_coefficient

# Clutter polar coordinates (range m, azimuth rad) relative to the BS.
CLUTTER_POLAR = ((13.0, math.pi / 5), (20.0, 3 * math.pi / 14),
                 (29.0, 9 * math.pi / 17), (19.0, 15 * math.pi / 17))

# Master key for the fixed train/test pools of initial user positions;
# independent of the run seed so the pools are disjoint by construction.
_POOL_KEY = 0x15AC_5EED
_POOL_TRAIN_STREAM = 101
_POOL_TEST_STREAM = 202

_HEADINGS = ((1, 0), (-1, 0), (0, 1), (0, -1))
_EPS = 1e-9


@dataclass
class GeometrySnapshot:
    user_distances: np.ndarray
    user_aods: np.ndarray           # normalized angles pi*sin(bearing)
    user_radial_speeds: np.ndarray  # positive receding
    clutter_distances: np.ndarray
    clutter_aods: np.ndarray


@dataclass
class WorldState:
    cfg: SystemConfig
    positions: np.ndarray       # (U, 2)
    headings: np.ndarray        # (U, 2) unit axis vectors
    speeds: np.ndarray          # (U,)
    clutter_positions: np.ndarray   # (C, 2)
    clutter_reflections: np.ndarray  # (C,) complex, constant per episode
    road_xs: Tuple[float, float] = ()
    road_ys: Tuple[float, float] = ()

    def geometry(self) -> GeometrySnapshot:
        bs = np.asarray(self.cfg.bs_position_m)
        rel = self.positions - bs[None, :]
        d = np.hypot(rel[:, 0], rel[:, 1])
        if np.any(d < _EPS):
            raise ValueError("user collocated with the BS")
        bearing = np.arctan2(rel[:, 1], rel[:, 0])
        aod = np.pi * np.sin(bearing)
        vel = self.headings * self.speeds[:, None]
        radial = np.einsum("ui,ui->u", vel, rel / d[:, None])
        rel_c = self.clutter_positions - bs[None, :]
        d_c = np.hypot(rel_c[:, 0], rel_c[:, 1])
        aod_c = np.pi * np.sin(np.arctan2(rel_c[:, 1], rel_c[:, 0]))
        return GeometrySnapshot(d, aod, radial, d_c, aod_c)

    def advance(self, rng: SeededRng, dt: float) -> None:
        """Move users by speed*dt with turns, then redraw per-TTI speeds."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        gen = rng.generator
        for u in range(len(self.positions)):
            self.positions[u], self.headings[u] = _move(
                self.positions[u], self.headings[u], self.speeds[u] * dt,
                self.road_xs, self.road_ys, self.cfg.area_m, gen)
        sigma = math.sqrt(self.cfg.speed_variance)
        self.speeds = np.maximum(
            gen.normal(self.cfg.mean_speed_mps, sigma, size=len(self.speeds)), 0.0)


def road_lines(cfg: SystemConfig) -> tuple:
    """Vertical and horizontal road coordinates (thirds of the area)."""
    w, h = cfg.area_m
    return (w / 3.0, 2 * w / 3.0), (h / 3.0, 2 * h / 3.0)


def _intersections(road_xs, road_ys):
    return [(x, y) for x in road_xs for y in road_ys]


def _move(pos, heading, dist, road_xs, road_ys, area, gen):
    """Piecewise advance along the road grid with intersection turns and
    boundary U-turns."""
    pos = pos.astype(float).copy()
    heading = heading.astype(float).copy()
    remaining = float(dist)
    guard = 0
    while remaining > _EPS:
        guard += 1
        if guard > 64:  # cannot happen at simulated speeds; avoid infinite loop
            break
        event_dist, kind = _next_event(pos, heading, road_xs, road_ys, area)
        if event_dist is None or event_dist > remaining:
            pos += heading * remaining
            break
        pos += heading * event_dist
        remaining -= event_dist
        if kind == "boundary":
            heading = -heading
        else:
            options = [np.array(h, dtype=float) for h in _HEADINGS
                       if not np.allclose(h, heading)]
            heading = options[int(gen.integers(0, len(options)))]
    return pos, heading


def _next_event(pos, heading, road_xs, road_ys, area):
    """Distance to the next intersection or boundary along the heading."""
    best, kind = None, None
    for ix, iy in _intersections(road_xs, road_ys):
        delta = np.array([ix, iy]) - pos
        along = float(delta @ heading)
        off_axis = float(np.linalg.norm(delta - along * heading))
        if along > _EPS and off_axis < 1e-6:
            if best is None or along < best:
                best, kind = along, "intersection"
    # boundary of the area along the current axis
    for axis in (0, 1):
        if heading[axis] > 0.5:
            along = area[axis] - pos[axis]
        elif heading[axis] < -0.5:
            along = pos[axis]
        else:
            continue
        if best is None or along < best:
            best, kind = along, "boundary"
    return best, kind


def _pool_positions(cfg: SystemConfig, train: bool) -> List[tuple]:
    """The fixed pool of initial (positions, headings) sets."""
    stream = _POOL_TRAIN_STREAM if train else _POOL_TEST_STREAM
    gen = SeededRng(_POOL_KEY, stream).generator
    road_xs, road_ys = road_lines(cfg)
    bs = np.asarray(cfg.bs_position_m)
    sets = []
    for _ in range(cfg.n_position_sets):
        pts, heads = [], []
        for _u in range(cfg.n_users):
            vertical = bool(gen.integers(0, 2))
            if vertical:
                x = road_xs[int(gen.integers(0, len(road_xs)))]
                y = gen.uniform(0.0, cfg.area_m[1])
                head = (0, 1) if gen.integers(0, 2) else (0, -1)
            else:
                y = road_ys[int(gen.integers(0, len(road_ys)))]
                x = gen.uniform(0.0, cfg.area_m[0])
                head = (1, 0) if gen.integers(0, 2) else (-1, 0)
            pts.append((x, y))
            heads.append(head)
        order = np.argsort([np.hypot(p[0] - bs[0], p[1] - bs[1]) for p in pts])
        pts = [pts[i] for i in order]      # user 1 closer to the BS
        heads = [heads[i] for i in order]
        sets.append((np.array(pts, dtype=float), np.array(heads, dtype=float)))
    return sets


def init_world(cfg: SystemConfig, rng: SeededRng, position_set_id: int,
               train_pool: bool = False) -> WorldState:
    """Build the episode's world from a pooled initial position set.

    Clutter positions are constants; clutter reflection phases are drawn
    once per episode from `rng`.
    """
    pool = _pool_positions(cfg, train_pool)
    if not 0 <= position_set_id < len(pool):
        raise ValueError(f"position_set_id must be in [0, {len(pool)})")
    positions, headings = pool[position_set_id]
    gen = rng.generator
    sigma = math.sqrt(cfg.speed_variance)
    speeds = np.maximum(gen.normal(cfg.mean_speed_mps, sigma, size=cfg.n_users), 0.0)

    bs = np.asarray(cfg.bs_position_m)
    cpos = np.array([[bs[0] + r * math.cos(th), bs[1] + r * math.sin(th)]
                     for r, th in CLUTTER_POLAR])
    d_c = np.hypot(cpos[:, 0] - bs[0], cpos[:, 1] - bs[1])
    mags = np.array([reflection_coefficient(d, cfg.rcs_m2, cfg.wavelength_m)
                     for d in d_c])
    phases = gen.uniform(0.0, 2 * np.pi, size=len(d_c))
    road_xs, road_ys = road_lines(cfg)
    return WorldState(cfg=cfg, positions=positions.copy(), headings=headings.copy(),
                      speeds=speeds, clutter_positions=cpos,
                      clutter_reflections=mags * np.exp(1j * phases),
                      road_xs=road_xs, road_ys=road_ys)
