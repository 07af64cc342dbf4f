"""Hand-crafted behavioural utilities over the anchor grid.

Four interpretable rules score every anchor from the normalized scene
state: keep-direction, avoid-occupancy, collision-avoidance and
leader-follower (the last one split into acceleration and deceleration
components).  A learnable weight per rule turns the feature table into
per-anchor utilities; a softmax turns total scores into a full-support
choice distribution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import kernels
from .anchors import AnchorSet, anchor_statics
from .geometry import NormalizedState

FEATURE_NAMES = ("dir", "occ", "col", "l_acc", "l_dec")
TERM_LABELS = {
    "dir": "keep direction",
    "occ": "occupancy",
    "col": "collision avoidance",
    "l_acc": "leader-follower (accelerate)",
    "l_dec": "leader-follower (decelerate)",
}


@dataclass
class BetaWeights:
    """Learnable rule weights, one per feature column."""

    dir: float = 0.0
    occ: float = 0.0
    col: float = 0.0
    acc: float = 0.0
    dec: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.dir, self.occ, self.col, self.acc, self.dec])

    @classmethod
    def from_array(cls, arr) -> "BetaWeights":
        d, o, c, a, e = (float(x) for x in arr)
        return cls(dir=d, occ=o, col=c, acc=a, dec=e)


@dataclass(frozen=True)
class FixedDcmParams:
    """Fixed shape constants of the hand-crafted rules (never trained).

    Cones are half-angles in radians; distances in metres.
    """

    perception_radius: float = 4.0
    occupancy_floor: float = 0.2
    collision_decay: float = 1.0
    collision_aim_cone: float = math.radians(15.0)
    leader_cone: float = math.radians(25.0)
    leader_range: float = 5.0
    # wider than one direction-grid step (30 deg), so a single-slot turn by
    # either pedestrian does not drop the leader
    leader_alignment_cone: float = math.radians(40.0)
    leader_distance_exponent: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("collision_aim_cone", "leader_cone", "leader_alignment_cone"):
            if not 0 < getattr(self, name) < math.pi:
                raise ValueError(f"{name} must lie in (0, pi)")


def compute_features(state: NormalizedState, anchor_set: AnchorSet, params: FixedDcmParams) -> np.ndarray:
    """(K, 5) feature table [dir, occ, col, l_acc, l_dec] for one step."""
    statics = anchor_statics(anchor_set.config)
    return kernels.feature_table(
        np.ascontiguousarray(state.neighbor_pos),
        np.ascontiguousarray(state.neighbor_vel),
        np.ascontiguousarray(anchor_set.displacements),
        statics["offsets"],
        statics["sector_lo_rel"],
        statics["sector_hi_rel"],
        statics["multipliers"],
        state.speed,
        params.perception_radius,
        params.occupancy_floor,
        params.collision_decay,
        params.collision_aim_cone,
        params.leader_cone,
        params.leader_range,
        params.leader_alignment_cone,
        params.leader_distance_exponent,
    )


def keep_direction(anchor_set: AnchorSet) -> np.ndarray:
    """Absolute direction change (radians) of each anchor."""
    return np.abs(anchor_set.offsets)


def occupancy(state: NormalizedState, anchor_set: AnchorSet, params: FixedDcmParams) -> np.ndarray:
    """Inverse-gap crowding of each anchor's direction sector."""
    return compute_features(state, anchor_set, params)[:, 1]


def collision_avoidance(state: NormalizedState, anchor_set: AnchorSet, params: FixedDcmParams) -> np.ndarray:
    """Discount for anchors that closing neighbours are headed at."""
    return compute_features(state, anchor_set, params)[:, 2]


def leader_follower(state: NormalizedState, anchor_set: AnchorSet, params: FixedDcmParams) -> tuple[np.ndarray, np.ndarray]:
    """(accelerate, decelerate) urges from the nearest aligned leader per cone."""
    feats = compute_features(state, anchor_set, params)
    return feats[:, 3], feats[:, 4]


def utility(features: np.ndarray, beta: BetaWeights) -> np.ndarray:
    """Per-anchor utility: the beta-weighted sum of the feature columns."""
    return features @ beta.as_array()


def mnl_probabilities(scores: np.ndarray) -> np.ndarray:
    """Softmax over anchor scores (max-subtracted for stability)."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("anchor scores must be finite")
    z = np.exp(scores - np.max(scores))
    return z / np.sum(z)


@dataclass(frozen=True)
class InterpretabilityReport:
    """Per-anchor activation maps behind one prediction.

    ``term_maps`` holds the five beta-weighted rule maps keyed by feature
    name; adding ``motion_map`` (recurrent logits) and ``interaction_map``
    (pooling logits) to their sum reproduces ``total`` exactly.
    """

    anchor_set: AnchorSet
    term_maps: dict[str, np.ndarray]
    motion_map: np.ndarray  # (K,)
    interaction_map: np.ndarray  # (K,)
    total: np.ndarray  # (K,)
    probabilities: np.ndarray  # (K,)
    features: np.ndarray = field(repr=False)  # (K, 5) raw, unweighted

    @property
    def utility_map(self) -> np.ndarray:
        """The combined hand-crafted (DCM) map."""
        return sum(self.term_maps.values())

    @property
    def nn_map(self) -> np.ndarray:
        """The combined neural map."""
        return self.motion_map + self.interaction_map

    def panels(self) -> dict[str, np.ndarray]:
        """The seven maps shown side by side, plus the probabilities."""
        return {
            "combined": self.total,
            "nn": self.nn_map,
            "dcm": self.utility_map,
            "keep_direction": self.term_maps["dir"],
            "occupancy": self.term_maps["occ"],
            "collision": self.term_maps["col"],
            "leader_follower": self.term_maps["l_acc"] + self.term_maps["l_dec"],
            "probabilities": self.probabilities,
        }


def explain(
    state: NormalizedState,
    anchor_set: AnchorSet,
    beta: BetaWeights,
    params: FixedDcmParams,
    motion_logits: np.ndarray | None = None,
    interaction_logits: np.ndarray | None = None,
) -> InterpretabilityReport:
    """Break one step's anchor scores into their additive maps.

    Neural logits default to zeros (pure-DCM mode).
    """
    k = len(anchor_set)
    features = compute_features(state, anchor_set, params)
    h = np.zeros(k) if motion_logits is None else np.asarray(motion_logits, dtype=np.float64)
    p = np.zeros(k) if interaction_logits is None else np.asarray(interaction_logits, dtype=np.float64)
    b = beta.as_array()
    term_maps = {name: b[i] * features[:, i] for i, name in enumerate(FEATURE_NAMES)}
    total = sum(term_maps.values()) + h + p
    return InterpretabilityReport(
        anchor_set=anchor_set,
        term_maps=term_maps,
        motion_map=h,
        interaction_map=p,
        total=total,
        probabilities=mnl_probabilities(total),
        features=features,
    )
