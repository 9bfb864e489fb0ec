import numpy as np
import pytest

from app.core import ops
from app.core.exceptions import ShapeError
from app.core.module import Conv2d
from app.core.tensor import Tensor
from app.models.config import BackboneSpec, FusionSpec, Placement, TccConfig
from app.models.pyramid import PyramidLevel
from app.services.backbone import Backbone, backbone_forward
from app.services.pyramid_fusion import (
    FeaturePyramid,
    fuse_level,
    pyramid_forward,
    refine_conv3x3,
    resample_to_level,
)

pytestmark = pytest.mark.unit


@pytest.fixture
def image(rng):
    return Tensor(rng.standard_normal((1, 3, 64, 64)))


def random_levels(rng, width=8, base=16, batch=1):
    return [
        PyramidLevel(i, 4 * 2 ** i, Tensor(rng.standard_normal((batch, width, base // 2 ** i, base // 2 ** i))))
        for i in range(4)
    ]


class TestBackbone:
    def test_level_shapes(self, image):
        levels = backbone_forward(image, BackboneSpec())
        assert [level.spatial for level in levels] == [(16, 16), (8, 8), (4, 4), (2, 2)]
        assert [level.stride for level in levels] == [4, 8, 16, 32]
        assert {level.channels for level in levels} == {64}

    def test_level_shape_law(self, rng):
        image = Tensor(rng.standard_normal((1, 3, 96, 64)))
        for level in backbone_forward(image, BackboneSpec(width=16)):
            H, W = level.spatial
            assert level.stride * H >= 96 > level.stride * (H - 1)
            assert level.stride * W >= 64 > level.stride * (W - 1)

    def test_zero_image_gives_zero_features(self):
        levels = backbone_forward(Tensor(np.zeros((1, 3, 32, 32))), BackboneSpec())
        assert all(not np.any(level.features.data) for level in levels)

    def test_same_seed_bit_identical(self, image):
        first = backbone_forward(image, BackboneSpec(seed=7))
        second = backbone_forward(image, BackboneSpec(seed=7))
        for a, b in zip(first, second):
            assert a.features.data.tobytes() == b.features.data.tobytes()

    def test_rejects_indivisible_extents(self):
        with pytest.raises(ShapeError):
            Backbone(BackboneSpec())(Tensor(np.zeros((1, 3, 48, 64))))


class TestResampleAndFuse:
    def test_upsamples_deeper_level(self, rng):
        levels = random_levels(rng)
        out = resample_to_level(levels[1], 0)
        np.testing.assert_array_equal(out.data, ops.upsample_nearest(levels[1].features, 2).data)

    def test_same_level_is_identity(self, rng):
        levels = random_levels(rng)
        assert resample_to_level(levels[2], 2) is levels[2].features

    def test_up_then_down_roundtrip(self, rng):
        blocky = np.repeat(np.repeat(rng.standard_normal((1, 2, 4, 4)), 2, axis=2), 2, axis=3)
        level = PyramidLevel(1, 8, Tensor(blocky))
        up = PyramidLevel(0, 4, resample_to_level(level, 0))
        np.testing.assert_array_equal(resample_to_level(up, 1).data, blocky)

    def test_no_neighbors_is_identity(self, rng):
        top = random_levels(rng)[3]
        assert fuse_level(top, []) is top.features

    def test_two_level_sum(self, rng):
        levels = random_levels(rng)
        fused = fuse_level(levels[0], [levels[1]])
        manual = levels[0].features.data + np.repeat(np.repeat(levels[1].features.data, 2, axis=2), 2, axis=3)
        np.testing.assert_allclose(fused.data, manual, atol=1e-15)

    def test_additive_in_target(self, rng):
        levels = random_levels(rng)
        a, b = levels[0].features, Tensor(rng.standard_normal(levels[0].features.shape))
        both = fuse_level(PyramidLevel(0, 4, ops.add(a, b)), [levels[1]])
        only_a = fuse_level(PyramidLevel(0, 4, a), [levels[1]])
        np.testing.assert_allclose(both.data, only_a.data + b.data, atol=1e-12)

    def test_channel_mismatch(self, rng):
        levels = random_levels(rng)
        other = PyramidLevel(1, 8, Tensor(np.zeros((1, 4, 8, 8))))
        with pytest.raises(ShapeError):
            fuse_level(levels[0], [other])


class TestRefineConv:
    def test_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 5, 3)))
        conv = Conv2d(4, 4, 3, padding=1)
        weight = np.zeros((4, 4, 3, 3))
        for c in range(4):
            weight[c, c, 1, 1] = 1.0
        conv.weight.assign(weight)
        np.testing.assert_array_equal(refine_conv3x3(x, conv).data, x.data)

    @pytest.mark.parametrize("hw", [(1, 1), (2, 7), (6, 6)])
    def test_shape_preserved(self, rng, hw):
        x = Tensor(rng.standard_normal((1, 3, *hw)))
        conv = Conv2d(3, 3, 3, np.random.default_rng(0), padding=1)
        assert refine_conv3x3(x, conv).shape == x.shape


class TestPyramidForward:
    def test_none_returns_fused_maps(self, rng):
        levels = random_levels(rng)
        out = FeaturePyramid(8, 4, FusionSpec(refinement="none"))(levels)
        np.testing.assert_array_equal(out[3].features.data, levels[3].features.data)
        expected2 = levels[2].features.data + np.repeat(np.repeat(levels[3].features.data, 2, 2), 2, 3)
        np.testing.assert_allclose(out[2].features.data, expected2, atol=1e-15)
        expected1 = levels[1].features.data + np.repeat(np.repeat(expected2, 2, 2), 2, 3)
        np.testing.assert_allclose(out[1].features.data, expected1, atol=1e-14)

    def test_conv3x3_matches_manual_composition(self, rng):
        levels = random_levels(rng)
        pyramid = FeaturePyramid(8, 4, FusionSpec(refinement="conv3x3"), seed=3)
        out = pyramid(levels)
        plain = FeaturePyramid(8, 4, FusionSpec(refinement="none"))(levels)
        for i in range(4):
            manual = ops.conv2d(plain[i].features, pyramid.conv_refiners[i].conv.weight,
                                pyramid.conv_refiners[i].conv.bias, padding=1)
            np.testing.assert_allclose(out[i].features.data, manual.data, atol=1e-12)

    def test_tcc_both_placements_owns_two_blocks_per_level(self, rng):
        pyramid = FeaturePyramid(8, 4, FusionSpec(refinement="tcc"), TccConfig(base_channels=1), seed=0)
        assert sorted(pyramid.tcc_before) == sorted(pyramid.tcc_after) == [0, 1, 2, 3]
        assert all(len(block.stacks) == 2 for block in pyramid.tcc_before.values())
        rounds = []
        pyramid(random_levels(rng), recorder=rounds)
        assert len(rounds) == 4 * 2 * 2

    def test_tcc_identity_at_init_equals_none(self, rng):
        levels = random_levels(rng)
        tcc_out = FeaturePyramid(8, 4, FusionSpec(refinement="tcc"), TccConfig(base_channels=1))(levels)
        none_out = FeaturePyramid(8, 4, FusionSpec(refinement="none"))(levels)
        for a, b in zip(tcc_out, none_out):
            np.testing.assert_array_equal(a.features.data, b.features.data)

    def test_placement_override(self):
        fusion = FusionSpec(refinement="tcc", tcc_placement=Placement(before_fusion=False))
        pyramid = FeaturePyramid(8, 4, fusion, TccConfig(base_channels=1))
        assert not pyramid.tcc_before and len(pyramid.tcc_after) == 4

    def test_top_level_input_is_backbone_feature(self, rng):
        levels = random_levels(rng)
        out = FeaturePyramid(8, 4, FusionSpec(refinement="none"))(levels)
        assert out[3].features is levels[3].features

    def test_deterministic(self, image):
        spec = BackboneSpec(width=16, stage_channels=(8, 8, 16, 16))
        fusion = FusionSpec(refinement="tcc")
        first = pyramid_forward(image, spec, fusion, TccConfig(base_channels=2), seed=4)
        second = pyramid_forward(image, spec, fusion, TccConfig(base_channels=2), seed=4)
        for a, b in zip(first, second):
            assert a.features.data.tobytes() == b.features.data.tobytes()
