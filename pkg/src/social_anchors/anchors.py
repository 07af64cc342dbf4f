"""Radial anchor grid: the discrete set of candidate next-step intents.

Anchors are per-step displacements in the normalized frame, one per
(speed multiplier, direction offset) pair.  The grid is rebuilt every
timestep from the pedestrian's current speed, so the same anchor index
always means the same manoeuvre ("keep going", "brake and veer left",
...) regardless of the absolute motion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

DEFAULT_DIRECTION_OFFSETS = tuple(math.radians(d) for d in (-60.0, -30.0, 0.0, 30.0, 60.0))
DEFAULT_SPEED_MULTIPLIERS = (0.5, 1.0, 1.5)


@dataclass(frozen=True)
class AnchorConfig:
    """Geometry of the anchor grid.

    ``min_radius`` keeps the grid of a (near-)stationary pedestrian a
    small ring instead of a point, so closest-anchor assignment stays
    informative.
    """

    direction_offsets: tuple[float, ...] = DEFAULT_DIRECTION_OFFSETS
    speed_multipliers: tuple[float, ...] = DEFAULT_SPEED_MULTIPLIERS
    min_radius: float = 0.04

    def __post_init__(self):
        object.__setattr__(self, "direction_offsets", tuple(float(d) for d in self.direction_offsets))
        object.__setattr__(self, "speed_multipliers", tuple(float(m) for m in self.speed_multipliers))
        offs = np.asarray(self.direction_offsets)
        mults = np.asarray(self.speed_multipliers)
        if offs.size == 0 or mults.size == 0:
            raise ValueError("anchor grid must be non-empty")
        if np.any(np.diff(offs) <= 0) or np.any(np.diff(mults) <= 0):
            raise ValueError("direction offsets and speed multipliers must be strictly sorted")
        if not np.allclose(offs, -offs[::-1], atol=1e-12):
            raise ValueError("direction offsets must be symmetric about 0")
        if np.any(mults <= 0):
            raise ValueError("speed multipliers must be positive")
        if self.min_radius <= 0:
            raise ValueError("min_radius must be positive")

    @property
    def n_directions(self) -> int:
        return len(self.direction_offsets)

    @property
    def n_speeds(self) -> int:
        return len(self.speed_multipliers)

    @property
    def n_anchors(self) -> int:
        return self.n_directions * self.n_speeds

    def sector_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Angular sector owned by each direction slot, as (low, high) arrays.

        A slot's sector extends half the spacing to each adjacent slot;
        edge slots mirror their single inner gap outward.  (Uniform
        default grid: offset +/- 15 degrees everywhere.)
        """
        offs = np.asarray(self.direction_offsets)
        if offs.size == 1:
            return offs - math.pi, offs + math.pi
        gaps = np.diff(offs)
        below = np.concatenate([[gaps[0]], gaps]) / 2.0
        above = np.concatenate([gaps, [gaps[-1]]]) / 2.0
        return offs - below, offs + above


@dataclass(frozen=True)
class AnchorSet:
    """The K candidate displacements for one pedestrian at one timestep.

    Flat index runs speed-major: ``k = s * n_directions + d``, i.e. the
    grid reads as N_s speed rows by N_d direction columns.  With the
    default 5 x 3 grid, index 7 is the keep-speed/keep-direction anchor.
    """

    displacements: np.ndarray  # (K, 2) metres per step, normalized frame
    direction_slot: np.ndarray  # (K,) int64
    speed_slot: np.ndarray  # (K,) int64
    config: AnchorConfig = field(repr=False)

    def __len__(self) -> int:
        return len(self.displacements)

    @property
    def offsets(self) -> np.ndarray:
        """Direction offset (radians) of each anchor."""
        return np.asarray(self.config.direction_offsets)[self.direction_slot]

    @property
    def multipliers(self) -> np.ndarray:
        """Speed multiplier of each anchor."""
        return np.asarray(self.config.speed_multipliers)[self.speed_slot]


@lru_cache(maxsize=16)
def anchor_statics(cfg: AnchorConfig) -> dict:
    """Per-anchor constant arrays of a config (cached; treat as read-only)."""
    offs = np.asarray(cfg.direction_offsets)
    mults = np.asarray(cfg.speed_multipliers)
    d_slot, s_slot = np.meshgrid(np.arange(cfg.n_directions), np.arange(cfg.n_speeds))
    d_slot, s_slot = d_slot.ravel(), s_slot.ravel()
    lo, hi = cfg.sector_bounds()
    unit = mults[s_slot, None] * np.stack([np.cos(offs[d_slot]), np.sin(offs[d_slot])], axis=1)
    return {
        "direction_slot": d_slot,
        "speed_slot": s_slot,
        "unit": unit,
        "offsets": offs[d_slot],
        "multipliers": mults[s_slot],
        "sector_lo_rel": (lo - offs)[d_slot],
        "sector_hi_rel": (hi - offs)[d_slot],
    }


def build_anchor_set(current_speed: float, cfg: AnchorConfig) -> AnchorSet:
    """Anchor grid for a pedestrian currently moving at ``current_speed`` m/step.

    Anchor (d, s) is ``r * m_s * (cos phi_d, sin phi_d)`` with
    ``r = max(current_speed, min_radius)``.
    """
    if current_speed < 0:
        raise ValueError("current_speed must be non-negative")
    statics = anchor_statics(cfg)
    r = max(float(current_speed), cfg.min_radius)
    return AnchorSet(
        displacements=r * statics["unit"],
        direction_slot=statics["direction_slot"],
        speed_slot=statics["speed_slot"],
        config=cfg,
    )


def closest_anchor(anchor_set: AnchorSet, gt_displacement: np.ndarray) -> int:
    """Index of the anchor nearest (L2) to a displacement; ties to lowest index."""
    d = anchor_set.displacements - np.asarray(gt_displacement, dtype=np.float64)
    return int(np.argmin(np.einsum("kj,kj->k", d, d)))
