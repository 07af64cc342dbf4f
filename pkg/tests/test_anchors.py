import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from social_anchors.anchors import AnchorConfig, build_anchor_set, closest_anchor


class TestBuild:
    def test_default_grid_has_15_anchors(self, anchor_cfg):
        assert anchor_cfg.n_anchors == 15
        assert len(build_anchor_set(0.4, anchor_cfg)) == 15

    def test_keep_course_anchor(self, anchor_cfg):
        aset = build_anchor_set(0.4, anchor_cfg)
        k = int(np.nonzero((aset.offsets == 0.0) & (aset.multipliers == 1.0))[0][0])
        assert np.allclose(aset.displacements[k], [0.4, 0.0])

    def test_accelerate_straight(self, anchor_cfg):
        aset = build_anchor_set(0.4, anchor_cfg)
        k = int(np.nonzero((aset.offsets == 0.0) & (aset.multipliers == 1.5))[0][0])
        assert np.allclose(aset.displacements[k], [0.6, 0.0])

    def test_speed_major_index_order(self, anchor_cfg):
        aset = build_anchor_set(0.4, anchor_cfg)
        # index 7 = second speed row, middle direction: keep course
        assert aset.speed_slot[7] == 1 and aset.direction_slot[7] == 2
        assert np.allclose(aset.displacements[7], [0.4, 0.0])

    def test_stationary_pedestrian_gets_min_radius_ring(self, anchor_cfg):
        aset = build_anchor_set(0.0, anchor_cfg)
        radii = np.linalg.norm(aset.displacements, axis=1)
        assert radii.min() == pytest.approx(0.04 * 0.5)
        assert radii.max() == pytest.approx(0.04 * 1.5)

    def test_negative_speed_rejected(self, anchor_cfg):
        with pytest.raises(ValueError):
            build_anchor_set(-0.1, anchor_cfg)

    def test_mirror_symmetry(self, anchor_cfg):
        """Negating the offsets reflects the grid about the x-axis."""
        mirrored = AnchorConfig(
            direction_offsets=tuple(sorted(-d for d in anchor_cfg.direction_offsets)),
            speed_multipliers=anchor_cfg.speed_multipliers,
            min_radius=anchor_cfg.min_radius,
        )
        a = build_anchor_set(0.7, anchor_cfg).displacements
        b = build_anchor_set(0.7, mirrored).displacements
        reflected = a * np.array([1.0, -1.0])
        # same multiset of points
        assert np.allclose(sorted(map(tuple, reflected)), sorted(map(tuple, b)), atol=1e-12)

    @given(speed=st.floats(0.05, 3.0), scale=st.floats(1.1, 4.0))
    def test_linear_scaling_above_floor(self, speed, scale):
        cfg = AnchorConfig()
        a = build_anchor_set(speed, cfg).displacements
        b = build_anchor_set(speed * scale, cfg).displacements
        assert np.allclose(b, a * scale, rtol=1e-12, atol=0)


class TestConfigValidation:
    def test_asymmetric_offsets_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            AnchorConfig(direction_offsets=(-0.5, 0.0, 0.6))

    def test_unsorted_multipliers_rejected(self):
        with pytest.raises(ValueError, match="sorted"):
            AnchorConfig(speed_multipliers=(1.0, 0.5, 1.5))

    def test_nonpositive_multiplier_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            AnchorConfig(speed_multipliers=(-0.5, 0.5, 1.0))

    def test_min_radius_positive(self):
        with pytest.raises(ValueError, match="min_radius"):
            AnchorConfig(min_radius=0.0)

    def test_sector_bounds_uniform_grid(self, anchor_cfg):
        lo, hi = anchor_cfg.sector_bounds()
        offs = np.asarray(anchor_cfg.direction_offsets)
        assert np.allclose(hi - offs, math.radians(15))
        assert np.allclose(offs - lo, math.radians(15))

    def test_sector_bounds_nonuniform(self):
        cfg = AnchorConfig(direction_offsets=(math.radians(-60), math.radians(-20), 0.0,
                                              math.radians(20), math.radians(60)))
        lo, hi = cfg.sector_bounds()
        assert hi[0] - cfg.direction_offsets[0] == pytest.approx(math.radians(20))
        assert cfg.direction_offsets[0] - lo[0] == pytest.approx(math.radians(20))
        assert hi[2] - 0.0 == pytest.approx(math.radians(10))


class TestClosestAnchor:
    def test_exact_hit(self, anchor_cfg):
        aset = build_anchor_set(0.4, anchor_cfg)
        assert closest_anchor(aset, aset.displacements[7]) == 7

    def test_near_keep_course(self, anchor_cfg):
        aset = build_anchor_set(0.4, anchor_cfg)
        k = closest_anchor(aset, np.array([0.41, 0.01]))
        # brute-force oracle over all 15 anchors
        dists = np.linalg.norm(aset.displacements - np.array([0.41, 0.01]), axis=1)
        assert k == int(np.argmin(dists))
        assert aset.offsets[k] == 0.0 and aset.multipliers[k] == 1.0

    def test_tie_breaks_to_lowest_index(self):
        # 90-degree fork: anchors 0 and 2 are exact mirror images in y, so a
        # displacement on the x-axis behind the pedestrian ties them bitwise
        cfg = AnchorConfig(
            direction_offsets=(-math.pi / 2, 0.0, math.pi / 2),
            speed_multipliers=(1.0,),
        )
        aset = build_anchor_set(0.4, cfg)
        gt = np.array([-0.4, 0.0])
        d = np.einsum("kj,kj->k", aset.displacements - gt, aset.displacements - gt)
        assert d[0] == d[2] and d[0] < d[1]  # genuine float-exact tie
        assert closest_anchor(aset, gt) == 0

    @settings(max_examples=200)
    @given(
        speed=st.floats(0.0, 2.0),
        gx=st.floats(-2, 2),
        gy=st.floats(-2, 2),
    )
    def test_matches_exhaustive_oracle(self, speed, gx, gy):
        aset = build_anchor_set(speed, AnchorConfig())
        gt = np.array([gx, gy])
        best, best_d = 0, math.inf
        for k in range(len(aset)):
            ax, ay = aset.displacements[k]
            d = (ax - gt[0]) ** 2 + (ay - gt[1]) ** 2
            if d < best_d:
                best, best_d = k, d
        assert closest_anchor(aset, gt) == best
