import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from social_anchors.geometry import (
    FrameTransform,
    MissingFrameError,
    heading,
    normalize_scene_at,
    scene_arrays,
    to_world,
    velocity,
)

from conftest import make_track, simple_scene, straight_track


class TestVelocity:
    def test_difference(self):
        traj = make_track(0, 1, [[0.0, 0.0], [0.4, 0.0]])
        assert np.allclose(velocity(traj, 2), [0.4, 0.0])

    def test_stationary(self):
        traj = make_track(0, 1, [[1.0, 1.0], [1.0, 1.0]])
        assert np.allclose(velocity(traj, 2), [0.0, 0.0])

    def test_three_four_five(self):
        traj = make_track(0, 1, [[0.0, 0.0], [0.3, 0.4]])
        v = velocity(traj, 2)
        assert np.allclose(v, [0.3, 0.4])
        assert math.hypot(*v) == pytest.approx(0.5)

    def test_missing_frame(self):
        traj = make_track(0, 5, [[0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(MissingFrameError):
            velocity(traj, 5)  # frame 4 absent


class TestHeading:
    def test_up(self):
        assert heading(np.array([0.0, 1.0]), fallback=0.0) == pytest.approx(math.pi / 2)

    def test_degenerate_uses_fallback(self):
        assert heading(np.array([0.0, 0.0]), fallback=0.3) == 0.3

    def test_minus_x_maps_to_pi(self):
        assert heading(np.array([-1.0, 0.0]), fallback=0.0) == pytest.approx(math.pi)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            heading(np.array([1.0, 0.0]), eps=0.0)


class TestNormalize:
    def test_heading_up_becomes_plus_x(self):
        scene = simple_scene([straight_track(0, (0.0, 0.0), (0.0, 0.4), 21)])
        state, _ = normalize_scene_at(scene, 5)
        assert np.allclose(state.vel, [0.4, 0.0], atol=1e-12)

    def test_neighbour_rotates_with_primary(self):
        # primary heading +y; neighbour offset (0, 1) is straight ahead -> (1, 0)
        scene = simple_scene(
            [
                straight_track(0, (0.0, 0.0), (0.0, 0.4), 21),
                straight_track(1, (0.0, 1.0), (0.0, 0.4), 21),
            ]
        )
        state, _ = normalize_scene_at(scene, 5)
        assert np.allclose(state.neighbor_pos, [[1.0, 0.0]], atol=1e-12)

    def test_canonical_scene_identity_transform(self):
        scene = simple_scene([straight_track(0, (-1.6, 0.0), (0.4, 0.0), 21)])
        state, tf = normalize_scene_at(scene, 5)
        assert tf.rotation == pytest.approx(0.0, abs=1e-12)
        # at frame 5 the primary has moved 4 steps from (-1.6, 0)
        assert np.allclose(tf.origin, [0.0, 0.0], atol=1e-12)
        assert np.allclose(state.vel, [0.4, 0.0])

    def test_missing_primary_errors(self):
        scene = simple_scene(
            [
                straight_track(0, (0.0, 0.0), (0.4, 0.0), 21),
                straight_track(1, (2.0, 0.0), (0.2, 0.0), 21),
            ]
        )
        with pytest.raises(MissingFrameError):
            normalize_scene_at(scene, 1)  # no frame 0 to form a velocity

    def test_stationary_primary_falls_back_to_last_heading(self):
        pts = [[0.0, 0.4 * i] for i in range(5)] + [[0.0, 1.6]] * 16
        scene = simple_scene(
            [make_track(0, 1, pts), straight_track(1, (1.0, 3.0), (0.0, 0.1), 21)]
        )
        state, tf = normalize_scene_at(scene, 10)  # stationary for several frames
        assert tf.rotation == pytest.approx(math.pi / 2)  # last moving heading was +y
        # neighbour world offset (1.0, 2.3) rotated by -pi/2 -> (2.3, -1.0)
        assert np.allclose(state.neighbor_pos[0], [2.3, -1.0], atol=1e-9)

    def test_neighbours_missing_at_frame_are_excluded(self):
        scene = simple_scene(
            [
                straight_track(0, (0.0, 0.0), (0.4, 0.0), 21),
                straight_track(1, (5.0, 0.0), (0.0, 0.4), 10, start=8),
            ]
        )
        early, _ = normalize_scene_at(scene, 5)
        assert len(early.neighbor_ids) == 0
        # present at 8 but has no velocity until 9
        entering, _ = normalize_scene_at(scene, 8)
        assert len(entering.neighbor_ids) == 0
        later, _ = normalize_scene_at(scene, 10)
        assert list(later.neighbor_ids) == [1]


class TestToWorld:
    def test_quarter_turn(self):
        tf = FrameTransform(origin=np.zeros(2), rotation=math.pi / 2)
        assert np.allclose(to_world(tf, np.array([1.0, 0.0])), [0.0, 1.0], atol=1e-12)

    def test_identity(self):
        tf = FrameTransform(origin=np.array([3.0, -2.0]), rotation=0.0)
        assert np.allclose(to_world(tf, np.array([0.7, -0.2])), [0.7, -0.2])

    @given(
        theta=st.floats(-math.pi, math.pi),
        dx=st.floats(-5, 5),
        dy=st.floats(-5, 5),
    )
    def test_round_trip(self, theta, dx, dy):
        tf = FrameTransform(origin=np.array([1.0, 2.0]), rotation=theta)
        d = np.array([dx, dy])
        local = tf.rotate_to_local(d)
        assert np.allclose(to_world(tf, local), d, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), frame=st.integers(2, 20))
def test_normalization_invariants(seed, frame):
    from conftest import random_scene

    rng = np.random.default_rng(seed)
    scene = random_scene(rng)
    state, tf = normalize_scene_at(scene, frame)

    # primary faces +x whenever it is actually moving
    if state.speed >= 1e-3:
        assert abs(state.vel[1]) < 1e-12
        assert state.vel[0] >= 0

    # inverse transform reproduces raw neighbour positions
    ids, pos, present = scene_arrays(scene)
    for pid, local in zip(state.neighbor_ids, state.neighbor_pos):
        i = int(np.nonzero(ids == pid)[0][0])
        world = tf.position_to_world(local)
        assert np.allclose(world, pos[i, frame - 1], atol=1e-10)

    # normalization is an isometry: pairwise distances survive
    both = [i for i in range(len(ids)) if present[i, frame - 1] and present[i, frame - 2]]
    raw = pos[both, frame - 1]
    prim = int(np.nonzero(ids == scene.primary_id)[0][0])
    locals_ = {int(ids[i]): pos[i, frame - 1] for i in both}
    all_local = np.vstack([[0.0, 0.0], state.neighbor_pos])
    all_raw = np.vstack([locals_[scene.primary_id], *[locals_[int(p)] for p in state.neighbor_ids]])
    d_local = np.linalg.norm(all_local[:, None] - all_local[None, :], axis=2)
    d_raw = np.linalg.norm(all_raw[:, None] - all_raw[None, :], axis=2)
    assert np.allclose(d_local, d_raw, atol=1e-10)
    assert raw.shape[0] >= 1 and prim in both


class TestSceneValidation:
    def test_primary_must_cover_scene(self):
        with pytest.raises(ValueError, match="primary"):
            simple_scene(
                [
                    straight_track(0, (0.0, 0.0), (0.4, 0.0), 20),  # one frame short
                    straight_track(1, (1.0, 0.0), (0.4, 0.0), 21),
                ]
            )

    def test_horizon_ordering(self):
        with pytest.raises(ValueError, match="t_obs"):
            simple_scene([straight_track(0, (0.0, 0.0), (0.4, 0.0), 21)], t_obs=21, t_pred=21)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            simple_scene(
                [
                    straight_track(0, (0.0, 0.0), (0.4, 0.0), 21),
                    straight_track(0, (1.0, 0.0), (0.4, 0.0), 21),
                ]
            )

    def test_non_finite_positions_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            make_track(0, 1, [[0.0, np.nan]])

    def test_trajectories_sorted_by_id(self):
        scene = simple_scene(
            [
                straight_track(2, (0.0, 0.0), (0.4, 0.0), 21),
                straight_track(0, (1.0, 0.0), (0.4, 0.0), 21),
                straight_track(1, (2.0, 0.0), (0.4, 0.0), 21),
            ],
            primary_id=2,
        )
        assert [t.ped_id for t in scene.trajectories] == [0, 1, 2]
