"""Scene datasets: ndjson serialization and synthetic generators.

File format (newline-delimited JSON, one record per line):

* ``{"scene": {"id": ..., "p": primary id, "s": start frame, "e": end frame}}``
* ``{"track": {"f": frame, "p": pedestrian id, "x": metres, "y": metres}}``

Track records belong to the most recent scene record.  Coordinates are
written with 6 decimals; frames are consecutive integers (one per dt).

Two generators produce training data: a social-force simulator
(circle-crossing scenes with goal attraction and exponential pairwise
repulsion) and a rule-following agent simulator that samples anchors
from the softmax of hand-crafted utilities, logging every (feature
table, choice) pair so the rule weights can be re-estimated from the
log.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .anchors import AnchorConfig, build_anchor_set
from .dcm import BetaWeights, FixedDcmParams, compute_features, mnl_probabilities
from .geometry import Scene, Trajectory, normalize_arrays_at, to_world


class DataFormatError(ValueError):
    """A dataset file violates the record format or scene invariants."""


# ---------------------------------------------------------------------------
# ndjson read/write
# ---------------------------------------------------------------------------

def write_scenes(scenes: list[Scene], path) -> None:
    """Write scenes deterministically: by scene id, then frame, then ped id."""
    with open(path, "w") as fh:
        for scene in sorted(scenes, key=lambda s: s.scene_id):
            fh.write(
                json.dumps(
                    {
                        "scene": {
                            "id": scene.scene_id,
                            "p": scene.primary_id,
                            "s": scene.start_frame,
                            "e": scene.last_frame,
                        }
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )
            rows = []
            for traj in scene.trajectories:
                for i, point in enumerate(traj.points):
                    rows.append((traj.start_frame + i, traj.ped_id, point))
            rows.sort(key=lambda r: (r[0], r[1]))
            for frame, pid, point in rows:
                fh.write(
                    '{"track":{"f":%d,"p":%d,"x":%.6f,"y":%.6f}}\n' % (frame, pid, point[0], point[1])
                )


def read_scenes(path, t_obs: int = 9, dt: float = 0.4) -> list[Scene]:
    """Parse an ndjson dataset; malformed lines are reported by number."""
    raw_scenes: list[dict] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict) or len(record) != 1:
                raise DataFormatError(f"{path}:{lineno}: expected one scene or track record")
            kind, body = next(iter(record.items()))
            if kind == "scene":
                _require_fields(body, {"id": int, "p": int, "s": int, "e": int}, path, lineno)
                raw_scenes.append({"meta": body, "tracks": {}})
            elif kind == "track":
                _require_fields(
                    body, {"f": int, "p": int, "x": (int, float), "y": (int, float)}, path, lineno
                )
                if not raw_scenes:
                    raise DataFormatError(f"{path}:{lineno}: track record before any scene record")
                raw_scenes[-1]["tracks"].setdefault(body["p"], []).append(
                    (body["f"], float(body["x"]), float(body["y"]), lineno)
                )
            else:
                raise DataFormatError(f"{path}:{lineno}: unknown record type '{kind}'")

    scenes = []
    for raw in raw_scenes:
        meta = raw["meta"]
        t_pred = meta["e"] - meta["s"] + 1
        trajectories = []
        for pid, rows in raw["tracks"].items():
            rows.sort(key=lambda r: r[0])
            frames = [r[0] for r in rows]
            if any(b - a != 1 for a, b in zip(frames, frames[1:])):
                raise DataFormatError(
                    f"{path}: scene {meta['id']}: track of pedestrian {pid} has gaps "
                    f"or duplicate frames"
                )
            trajectories.append(
                Trajectory(
                    ped_id=pid,
                    start_frame=frames[0],
                    points=np.array([[r[1], r[2]] for r in rows]),
                )
            )
        try:
            scenes.append(
                Scene(
                    scene_id=meta["id"],
                    primary_id=meta["p"],
                    trajectories=tuple(trajectories),
                    t_obs=t_obs,
                    t_pred=t_pred,
                    dt=dt,
                    start_frame=meta["s"],
                )
            )
        except (ValueError, KeyError) as exc:
            raise DataFormatError(f"{path}: scene {meta['id']}: {exc}") from None
    return scenes


def _require_fields(body, spec: dict, path, lineno: int) -> None:
    if not isinstance(body, dict) or set(body) != set(spec):
        raise DataFormatError(f"{path}:{lineno}: expected fields {sorted(spec)}")
    for name, types in spec.items():
        value = body[name]
        if not isinstance(value, types) or isinstance(value, bool):
            raise DataFormatError(f"{path}:{lineno}: field '{name}' has wrong type")


def write_manifest(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Social-force generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """Circle-crossing social-force scenes."""

    n_scenes: int = 100
    min_peds: int = 2
    max_peds: int = 6
    arena_radius: float = 4.0
    desired_speed: float = 1.0  # m/s
    speed_jitter: float = 0.2
    relaxation_time: float = 0.5  # s
    repulsion_strength: float = 5.0  # keeps head-on pairs clear of contact range
    repulsion_range: float = 0.8  # m
    goal_tolerance: float = 0.3  # m
    spawn_gap: float = 0.2  # m, minimum pairwise spawn distance
    euler_substeps: int = 4  # integration substeps per recorded frame
    seed: int = 0

    def __post_init__(self):
        if self.n_scenes <= 0 or not 0 < self.min_peds <= self.max_peds:
            raise ValueError("need n_scenes > 0 and 0 < min_peds <= max_peds")
        for name in ("arena_radius", "desired_speed", "relaxation_time",
                     "repulsion_strength", "repulsion_range", "goal_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def _spawn_circle(rng, n: int, radius: float, min_gap: float) -> tuple[np.ndarray, np.ndarray]:
    """Jittered circle spawn with diametrically opposite goals."""
    for _attempt in range(100):
        base = rng.uniform(0.0, 2.0 * math.pi)
        angles = base + np.arange(n) * 2.0 * math.pi / n + rng.uniform(-0.3, 0.3, n)
        radii = radius * rng.uniform(0.9, 1.1, n)
        pos = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        gaps = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
        np.fill_diagonal(gaps, np.inf)
        if gaps.min() > min_gap:
            return pos, -pos
    raise RuntimeError("could not find a non-degenerate spawn")  # pragma: no cover


def generate_social_force(
    cfg: SimConfig, t_obs: int = 9, t_pred: int = 21, dt: float = 0.4
) -> tuple[list[Scene], dict[int, dict[int, np.ndarray]]]:
    """Generate scenes plus the per-pedestrian goals they steered towards."""
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_scenes)
    scenes, goals = [], {}
    for sid, child in enumerate(children):
        rng = np.random.default_rng(child)
        n = int(rng.integers(cfg.min_peds, cfg.max_peds + 1))
        pos0, goal = _spawn_circle(rng, n, cfg.arena_radius, cfg.spawn_gap)
        desired = cfg.desired_speed + rng.uniform(-cfg.speed_jitter, cfg.speed_jitter, n)
        to_goal = goal - pos0
        v0 = desired[:, None] * to_goal / np.linalg.norm(to_goal, axis=1, keepdims=True)
        frames = kernels.integrate_social_force(
            pos0,
            v0,
            goal,
            desired,
            t_pred,
            dt,
            cfg.relaxation_time,
            cfg.repulsion_strength,
            cfg.repulsion_range,
            cfg.goal_tolerance,
            2.0 * cfg.desired_speed,
            cfg.euler_substeps,
        )
        trajectories = tuple(
            Trajectory(ped_id=p, start_frame=1, points=frames[:, p, :].copy()) for p in range(n)
        )
        scenes.append(
            Scene(
                scene_id=sid,
                primary_id=0,
                trajectories=trajectories,
                t_obs=t_obs,
                t_pred=t_pred,
                dt=dt,
            )
        )
        goals[sid] = {p: goal[p].copy() for p in range(n)}
    return scenes, goals


# ---------------------------------------------------------------------------
# Rule-following (DCM) agent simulator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DcmSimConfig:
    """Agents that sample anchors from softmax(features @ beta).

    A ``platoon_fraction`` of scenes spawns agents in a same-direction
    file with alternating slow/fast walkers, which exercises the
    leader-follower rules; the rest spawn as crossing streams (occupancy
    and collision terms).  Every agent keeps a personal pace band around
    its spawn speed (``pace_band`` relative half-width, inside the global
    floor/cap): the sampled anchor decides the step, but the realized
    displacement is rescaled into the band.  Without this, anchor
    sampling random-walks all speeds together within a few steps and the
    relative-speed features lose their signal.  Choices are still drawn
    from the exact softmax of the logged features, so estimating weights
    from the log stays unbiased.
    """

    n_scenes: int = 400
    min_peds: int = 6
    max_peds: int = 10
    arena_radius: float = 2.5
    platoon_fraction: float = 0.65
    initial_speed: float = 0.4  # m/step
    speed_floor: float = 0.08  # m/step
    speed_cap: float = 0.8  # m/step
    pace_band: float = 0.2  # relative half-width of each agent's speed band
    seed: int = 0

    def __post_init__(self):
        if self.n_scenes <= 0 or not 0 < self.min_peds <= self.max_peds:
            raise ValueError("need n_scenes > 0 and 0 < min_peds <= max_peds")
        if not 0 <= self.platoon_fraction <= 1:
            raise ValueError("platoon_fraction must lie in [0, 1]")
        if not 0 < self.speed_floor < self.speed_cap:
            raise ValueError("need 0 < speed_floor < speed_cap")


@dataclass
class ChoiceLog:
    """Logged (feature table, sampled anchor) pairs from the simulator."""

    features: np.ndarray  # (N, K, 5)
    chosen: np.ndarray  # (N,) int64
    scene_ids: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.chosen)


def _spawn_platoon(rng, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Agents in single file, same heading, alternating slow/fast walkers.

    The sustained speed contrast between close leaders and followers is
    what makes the leader-follower weights identifiable from the logs.
    """
    theta = rng.uniform(0.0, 2.0 * math.pi)
    fwd = np.array([math.cos(theta), math.sin(theta)])
    side = np.array([-fwd[1], fwd[0]])
    offsets = np.cumsum(rng.uniform(0.6, 1.0, n))
    lateral = rng.uniform(-0.15, 0.15, n)
    pos = offsets[:, None] * fwd[None, :] + lateral[:, None] * side[None, :]
    pos -= pos.mean(axis=0)
    headings = np.full(n, theta) + rng.uniform(-0.05, 0.05, n)
    slow = rng.uniform(size=n) < 0.5
    factors = np.where(slow, rng.uniform(0.40, 0.55, n), rng.uniform(1.45, 1.60, n))
    return pos, headings, factors


def _spawn_crossing(rng, n: int, radius: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos, goals = _spawn_circle(rng, n, radius, 0.3)
    to_goal = goals - pos
    headings = np.arctan2(to_goal[:, 1], to_goal[:, 0])
    return pos, headings, rng.uniform(0.6, 1.4, n)


def simulate_dcm_agents(
    beta: BetaWeights,
    cfg: DcmSimConfig,
    anchor_cfg: AnchorConfig | None = None,
    dcm_params: FixedDcmParams | None = None,
    t_obs: int = 9,
    t_pred: int = 21,
    dt: float = 0.4,
) -> tuple[list[Scene], ChoiceLog]:
    """Roll scenes of agents choosing anchors by the hand-crafted rules alone."""
    anchor_cfg = anchor_cfg or AnchorConfig()
    dcm_params = dcm_params or FixedDcmParams()
    beta_vec = beta.as_array()
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_scenes)
    scenes: list[Scene] = []
    feats_log, chosen_log, sid_log = [], [], []
    for sid, child in enumerate(children):
        rng = np.random.default_rng(child)
        n = int(rng.integers(cfg.min_peds, cfg.max_peds + 1))
        if rng.uniform() < cfg.platoon_fraction:
            pos0, headings, factors = _spawn_platoon(rng, n)
        else:
            pos0, headings, factors = _spawn_crossing(rng, n, cfg.arena_radius)
        speeds = cfg.initial_speed * factors
        band_lo = np.maximum(cfg.speed_floor, (1.0 - cfg.pace_band) * speeds)
        band_hi = np.minimum(cfg.speed_cap, (1.0 + cfg.pace_band) * speeds)
        ids = np.arange(n, dtype=np.int64)
        pos = np.zeros((n, t_pred, 2))
        present = np.ones((n, t_pred), dtype=bool)
        pos[:, 0] = pos0
        pos[:, 1] = pos0 + speeds[:, None] * np.stack(
            [np.cos(headings), np.sin(headings)], axis=1
        )
        for ti in range(1, t_pred - 1):
            displacements = np.zeros((n, 2))
            for i in range(n):
                state = normalize_arrays_at(ids, pos, present, i, ti)
                anchor_set = build_anchor_set(state.speed, anchor_cfg)
                features = compute_features(state, anchor_set, dcm_params)
                pi = mnl_probabilities(features @ beta_vec)
                k = int(rng.choice(len(pi), p=pi))
                feats_log.append(features)
                chosen_log.append(k)
                sid_log.append(sid)
                disp = to_world(state.transform, anchor_set.displacements[k])
                speed = float(np.hypot(disp[0], disp[1]))
                clamped = min(max(speed, band_lo[i]), band_hi[i])
                if speed > 1e-12 and clamped != speed:
                    disp = disp * (clamped / speed)
                displacements[i] = disp
            pos[:, ti + 1] = pos[:, ti] + displacements
        trajectories = tuple(
            Trajectory(ped_id=int(p), start_frame=1, points=pos[p].copy()) for p in range(n)
        )
        scenes.append(
            Scene(
                scene_id=sid,
                primary_id=0,
                trajectories=trajectories,
                t_obs=t_obs,
                t_pred=t_pred,
                dt=dt,
            )
        )
    return scenes, ChoiceLog(
        features=np.array(feats_log),
        chosen=np.array(chosen_log, dtype=np.int64),
        scene_ids=np.array(sid_log, dtype=np.int64),
    )


def write_choice_log(log: ChoiceLog, path) -> None:
    with open(path, "w") as fh:
        for i in range(len(log)):
            record = {
                "choice": {
                    "scene": int(log.scene_ids[i]),
                    "k": int(log.chosen[i]),
                    "f": [[round(v, 12) for v in row] for row in log.features[i].tolist()],
                }
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_choice_log(path) -> ChoiceLog:
    feats, chosen, sids = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                body = json.loads(line)["choice"]
                feats.append(np.asarray(body["f"], dtype=np.float64))
                chosen.append(int(body["k"]))
                sids.append(int(body["scene"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise DataFormatError(f"{path}:{lineno}: invalid choice record") from None
    return ChoiceLog(
        features=np.array(feats),
        chosen=np.array(chosen, dtype=np.int64),
        scene_ids=np.array(sids, dtype=np.int64),
    )


def sim_manifest(cfg, n_scenes: int, extra: dict | None = None) -> dict:
    payload = {"config": asdict(cfg), "n_scenes": n_scenes}
    if extra:
        payload.update(extra)
    return payload
