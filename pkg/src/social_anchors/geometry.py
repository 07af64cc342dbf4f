"""Scene and trajectory types plus per-timestep direction normalization.

Positions, velocities and displacements are length-2 float64 numpy arrays
(metres / metres-per-step).  Every stochastic or learned component of the
package works in a *normalized frame*: for the pedestrian under
consideration, the scene is translated so that pedestrian sits at the
origin and rotated so its current heading points along +x.  The
:class:`FrameTransform` produced by :func:`normalize_scene_at` maps back
to world coordinates.

All functions here are pure; they never mutate their inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Speed (m/step) below which a velocity carries no usable heading.
HEADING_EPS = 1e-3


class MissingFrameError(ValueError):
    """A required frame is absent from a trajectory."""


@dataclass(frozen=True)
class Trajectory:
    """Contiguous track of one pedestrian.

    ``points[i]`` is the position at frame ``start_frame + i``.  Tracks
    are gap-free: a pedestrian enters the scene once and leaves once.
    """

    ped_id: int
    start_frame: int
    points: np.ndarray  # (n, 2) float64

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"trajectory points must be (n, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"non-finite position in track of pedestrian {self.ped_id}")
        object.__setattr__(self, "points", pts)

    @property
    def end_frame(self) -> int:
        return self.start_frame + len(self.points) - 1

    def present(self, frame: int) -> bool:
        return self.start_frame <= frame <= self.end_frame

    def position(self, frame: int) -> np.ndarray:
        if not self.present(frame):
            raise MissingFrameError(
                f"pedestrian {self.ped_id} has no frame {frame} "
                f"(track spans [{self.start_frame}, {self.end_frame}])"
            )
        return self.points[frame - self.start_frame]


@dataclass(frozen=True)
class Scene:
    """All pedestrian tracks of one forecasting instance.

    Frames run from ``start_frame`` to ``start_frame + t_pred - 1``; the
    first ``t_obs`` frames are observed, the rest are the prediction
    horizon.  The primary pedestrian must be present at every frame.
    """

    scene_id: int
    primary_id: int
    trajectories: tuple[Trajectory, ...]
    t_obs: int = 9
    t_pred: int = 21
    dt: float = 0.4
    start_frame: int = field(default=1)

    def __post_init__(self):
        trajs = tuple(sorted(self.trajectories, key=lambda tr: tr.ped_id))
        object.__setattr__(self, "trajectories", trajs)
        if len({tr.ped_id for tr in trajs}) != len(trajs):
            raise ValueError(f"scene {self.scene_id}: duplicate pedestrian ids")
        if not 0 < self.t_obs < self.t_pred:
            raise ValueError(f"need 0 < t_obs < t_pred, got {self.t_obs}, {self.t_pred}")
        prim = self.trajectory(self.primary_id)
        if prim.start_frame > self.start_frame or prim.end_frame < self.last_frame:
            raise ValueError(
                f"scene {self.scene_id}: primary {self.primary_id} not present over "
                f"[{self.start_frame}, {self.last_frame}]"
            )
        for traj in self.trajectories:
            if traj.start_frame < self.start_frame or traj.end_frame > self.last_frame:
                raise ValueError(
                    f"scene {self.scene_id}: track of pedestrian {traj.ped_id} "
                    f"leaves the scene frame range"
                )

    @property
    def last_frame(self) -> int:
        return self.start_frame + self.t_pred - 1

    @property
    def last_observed_frame(self) -> int:
        return self.start_frame + self.t_obs - 1

    @property
    def prediction_frames(self) -> range:
        return range(self.last_observed_frame + 1, self.last_frame + 1)

    def trajectory(self, ped_id: int) -> Trajectory:
        for traj in self.trajectories:
            if traj.ped_id == ped_id:
                return traj
        raise KeyError(f"scene {self.scene_id} has no pedestrian {ped_id}")

    @property
    def primary(self) -> Trajectory:
        return self.trajectory(self.primary_id)


@dataclass(frozen=True)
class FrameTransform:
    """Rigid transform from world frame into a normalized frame.

    Normalized coords: ``p' = R(-rotation) @ (p - origin)``.
    """

    origin: np.ndarray  # (2,)
    rotation: float  # radians, the pedestrian's world heading

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.origin) @ _rot(self.rotation)

    def position_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ _rot(self.rotation).T + self.origin

    def rotate_to_local(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ _rot(self.rotation)


def _rot(theta: float) -> np.ndarray:
    """Rotation matrix such that ``v @ _rot(theta)`` rotates row vectors by -theta."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def to_world(tf: FrameTransform, displacement: np.ndarray) -> np.ndarray:
    """Rotate a normalized-frame displacement back into the world frame.

    Displacements are direction/length only, so the transform's
    translation does not apply.
    """
    return np.asarray(displacement, dtype=np.float64) @ _rot(tf.rotation).T


def velocity(traj: Trajectory, t: int) -> np.ndarray:
    """Displacement per step at frame ``t``: position(t) - position(t-1)."""
    return traj.position(t) - traj.position(t - 1)


def heading(v: np.ndarray, fallback: float = 0.0, eps: float = HEADING_EPS) -> float:
    """Direction angle of ``v`` in (-pi, pi], or ``fallback`` below speed ``eps``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if math.hypot(v[0], v[1]) < eps:
        return fallback
    return math.atan2(v[1], v[0])


@dataclass(frozen=True)
class NormalizedState:
    """One pedestrian's view of the scene at one frame, in its own frame.

    Neighbours are the other pedestrians present at both ``t-1`` and ``t``
    (no velocity can be formed otherwise, and none of the downstream
    features is defined without one).  ``vel`` is the pedestrian's own
    per-step displacement rotated into the frame, so ``vel ~ (speed, 0)``
    whenever the speed is above the heading floor.
    """

    ped_id: int
    speed: float
    vel: np.ndarray  # (2,)
    neighbor_ids: np.ndarray  # (J,) int64
    neighbor_pos: np.ndarray  # (J, 2) positions relative to the pedestrian
    neighbor_vel: np.ndarray  # (J, 2) per-step velocities, rotated
    transform: FrameTransform


def _heading_with_fallback(pos: np.ndarray, ok: np.ndarray, ti: int) -> float:
    """Heading at row ``ti`` of a (T, 2) track, falling back through history.

    Uses the velocity into ``ti`` if fast enough, otherwise the most
    recent earlier velocity above the floor, otherwise +x.
    """
    for s in range(ti, 0, -1):
        if not (ok[s] and ok[s - 1]):
            continue
        v = pos[s] - pos[s - 1]
        if math.hypot(v[0], v[1]) >= HEADING_EPS:
            return math.atan2(v[1], v[0])
    return 0.0


def normalize_arrays_at(
    ids: np.ndarray,
    pos: np.ndarray,
    present: np.ndarray,
    ped_index: int,
    ti: int,
) -> NormalizedState:
    """Normalized state from dense arrays (pedestrians x frames x 2).

    ``ti`` indexes the frame axis.  The pedestrian at ``ped_index`` must
    be present at ``ti-1`` and ``ti``.
    """
    if ti < 1 or not (present[ped_index, ti] and present[ped_index, ti - 1]):
        raise MissingFrameError(
            f"pedestrian {ids[ped_index]} lacks frames {ti - 1}/{ti} for normalization"
        )
    own = pos[ped_index]
    v_world = own[ti] - own[ti - 1]
    theta = _heading_with_fallback(own, present[ped_index], ti)
    rot = _rot(theta)

    mask = present[:, ti] & present[:, ti - 1]
    mask[ped_index] = False
    neigh_pos = (pos[mask, ti] - own[ti]) @ rot
    neigh_vel = (pos[mask, ti] - pos[mask, ti - 1]) @ rot
    return NormalizedState(
        ped_id=int(ids[ped_index]),
        speed=float(math.hypot(v_world[0], v_world[1])),
        vel=v_world @ rot,
        neighbor_ids=ids[mask].copy(),
        neighbor_pos=neigh_pos,
        neighbor_vel=neigh_vel,
        transform=FrameTransform(origin=own[ti].copy(), rotation=theta),
    )


def scene_arrays(scene: Scene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense (ids, positions, presence) arrays for a scene.

    Positions are (N, T, 2) with zeros at absent frames; presence is the
    matching (N, T) bool mask.  Frame axis index 0 is ``scene.start_frame``.
    """
    n, t = len(scene.trajectories), scene.t_pred
    ids = np.array([traj.ped_id for traj in scene.trajectories], dtype=np.int64)
    pos = np.zeros((n, t, 2))
    present = np.zeros((n, t), dtype=bool)
    for i, traj in enumerate(scene.trajectories):
        lo = traj.start_frame - scene.start_frame
        present[i, lo : lo + len(traj.points)] = True
        pos[i, lo : lo + len(traj.points)] = traj.points
    return ids, pos, present


def normalize_scene_at(scene: Scene, t: int, ped_id: int | None = None) -> tuple[NormalizedState, FrameTransform]:
    """Normalize the scene at frame ``t`` around a pedestrian (default: primary)."""
    ped_id = scene.primary_id if ped_id is None else ped_id
    ids, pos, present = scene_arrays(scene)
    ped_index = int(np.nonzero(ids == ped_id)[0][0])
    state = normalize_arrays_at(ids, pos, present, ped_index, t - scene.start_frame)
    return state, state.transform
