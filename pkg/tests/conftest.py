import numpy as np
import pytest

from social_anchors.anchors import AnchorConfig
from social_anchors.dcm import FixedDcmParams
from social_anchors.geometry import Scene, Trajectory
from social_anchors.neural import ModelConfig


@pytest.fixture
def anchor_cfg():
    return AnchorConfig()


@pytest.fixture
def dcm_params():
    return FixedDcmParams()


@pytest.fixture
def model_cfg():
    return ModelConfig()


def make_track(ped_id, start, points):
    return Trajectory(ped_id=ped_id, start_frame=start, points=np.asarray(points, dtype=float))


def straight_track(ped_id, origin, velocity, n_frames, start=1):
    origin = np.asarray(origin, dtype=float)
    velocity = np.asarray(velocity, dtype=float)
    pts = origin + np.arange(n_frames)[:, None] * velocity
    return make_track(ped_id, start, pts)


def simple_scene(tracks, primary_id=0, t_obs=9, t_pred=21, scene_id=0):
    return Scene(
        scene_id=scene_id,
        primary_id=primary_id,
        trajectories=tuple(tracks),
        t_obs=t_obs,
        t_pred=t_pred,
        dt=0.4,
    )


@pytest.fixture
def two_ped_scene():
    """Primary walking +x at 0.4 m/step, neighbour 2 m ahead moving slower."""
    return simple_scene(
        [
            straight_track(0, (0.0, 0.0), (0.4, 0.0), 21),
            straight_track(1, (2.0, 0.0), (0.2, 0.0), 21),
        ]
    )


def random_scene(rng, scene_id=0, n_peds=4, t_obs=9, t_pred=21):
    tracks = []
    for pid in range(n_peds):
        origin = rng.uniform(-3, 3, 2)
        vel = rng.uniform(-0.5, 0.5, 2)
        wobble = rng.normal(0.0, 0.03, (t_pred, 2))
        pts = origin + np.arange(t_pred)[:, None] * vel + np.cumsum(wobble, axis=0)
        tracks.append(make_track(pid, 1, pts))
    return simple_scene(tracks, t_obs=t_obs, t_pred=t_pred, scene_id=scene_id)
