"""Transform draws, pure application, space counting, batch expansion."""

import numpy as np
import pytest

from batchaug.augment import (
    Compose, Cutout, HFlip, Identity, PadCrop, TransformDraw, apply,
    draw_transform, enumerate_space, expand_batch, format_transform,
    parse_transform)
from batchaug.errors import ConfigError, ContractViolation
from batchaug.rng import RngStream

SHAPE_32 = (3, 32, 32)


class TestSpecValidation:
    def test_bad_parameters_rejected(self):
        with pytest.raises(ContractViolation):
            PadCrop(-1)
        with pytest.raises(ContractViolation):
            HFlip(1.5)
        with pytest.raises(ContractViolation):
            Cutout(0)

    def test_cutout_larger_than_image_rejected(self):
        with pytest.raises(ContractViolation):
            draw_transform(Cutout(9), (1, 8, 8), RngStream(0))


class TestDraw:
    def test_identity_draw_is_empty(self):
        d = draw_transform(Identity(), SHAPE_32, RngStream(0))
        assert d.offsets is None and d.flip is None and d.center is None

    def test_padcrop_offsets_cover_range(self):
        stream = RngStream(1)
        seen = set()
        for _ in range(2000):
            d = draw_transform(PadCrop(4), SHAPE_32, stream)
            assert 0 <= d.offsets[0] <= 8 and 0 <= d.offsets[1] <= 8
            seen.add(d.offsets)
        assert len(seen) == 81

    def test_cutout_centers_cover_grid(self):
        stream = RngStream(2)
        seen = set()
        for _ in range(800):
            d = draw_transform(Cutout(2), (1, 4, 4), stream)
            assert 0 <= d.center[0] < 4 and 0 <= d.center[1] < 4
            seen.add(d.center)
        assert len(seen) == 16

    def test_flip_probability_extremes(self):
        s = RngStream(3)
        assert all(not draw_transform(HFlip(0.0), SHAPE_32, s).flip
                   for _ in range(50))
        assert all(draw_transform(HFlip(1.0), SHAPE_32, s).flip
                   for _ in range(50))
        flips = [draw_transform(HFlip(0.5), SHAPE_32, s).flip
                 for _ in range(400)]
        assert 120 < sum(flips) < 280

    def test_same_stream_state_same_draw(self):
        spec = Compose((PadCrop(4), HFlip(0.5), Cutout(8)))
        s1, s2 = RngStream(9), RngStream(9)
        for _ in range(20):
            assert (draw_transform(spec, SHAPE_32, s1)
                    == draw_transform(spec, SHAPE_32, s2))


class TestApply:
    def test_apply_is_pure_and_leaves_input_alone(self):
        img = RngStream(0).uniform((1, 8, 8))
        before = img.copy()
        d = draw_transform(Compose((PadCrop(2), HFlip(1.0), Cutout(3))),
                           img.shape, RngStream(1))
        out1 = apply(d, img)
        out2 = apply(d, img)
        assert out1.tobytes() == out2.tobytes()
        assert np.array_equal(img, before)
        assert out1.shape == img.shape

    def test_padcrop_center_offset_is_identity(self):
        img = RngStream(4).uniform((3, 32, 32))
        d = TransformDraw(PadCrop(4), offsets=(4, 4))
        assert apply(d, img).tobytes() == img.tobytes()

    def test_padcrop_zero_offset_shifts_content(self):
        img = np.zeros((1, 32, 32))
        img[0, 8, 8] = 1.0
        out = apply(TransformDraw(PadCrop(4), offsets=(0, 0)), img)
        assert out[0, 12, 12] == 1.0
        assert out.sum() == 1.0

    def test_padcrop_brings_in_zero_border(self):
        img = np.ones((1, 8, 8))
        out = apply(TransformDraw(PadCrop(2), offsets=(0, 0)), img)
        assert np.all(out[0, :2, :] == 0.0)
        assert np.all(out[0, :, :2] == 0.0)
        assert np.all(out[0, 2:, 2:] == 1.0)

    def test_hflip_is_involution(self):
        img = RngStream(5).uniform((3, 16, 16))
        d = TransformDraw(HFlip(0.5), flip=True)
        assert apply(d, apply(d, img)).tobytes() == img.tobytes()
        assert not np.array_equal(apply(d, img), img)

    def test_hflip_false_is_identity(self):
        img = RngStream(6).uniform((1, 6, 6))
        assert apply(TransformDraw(HFlip(0.5), flip=False), img).tobytes() \
            == img.tobytes()

    def test_cutout_clips_at_corner(self):
        img = np.ones((1, 4, 4))
        out = apply(TransformDraw(Cutout(2), center=(0, 0)), img)
        assert out[0, 0, 0] == 0.0
        assert out.sum() == 15.0

    def test_cutout_interior_square(self):
        img = np.ones((2, 8, 8))
        out = apply(TransformDraw(Cutout(4), center=(4, 4)), img)
        assert np.all(out[:, 2:6, 2:6] == 0.0)
        assert out.sum() == 2 * (64 - 16)


class TestEnumerateSpace:
    def test_padcrop_flip_count(self):
        spec = Compose((PadCrop(4), HFlip(0.5)))
        assert enumerate_space(spec, SHAPE_32) == 162

    def test_identity(self):
        assert enumerate_space(Identity(), SHAPE_32) == 1

    def test_cutout_full_grid(self):
        assert enumerate_space(Cutout(8), SHAPE_32) == 1024

    def test_composition_multiplies(self):
        spec = Compose((PadCrop(4), HFlip(0.5), Cutout(8)))
        assert enumerate_space(spec, SHAPE_32) == 162 * 1024

    def test_flip_counts_two_outcomes_regardless_of_p(self):
        assert enumerate_space(HFlip(0.0), SHAPE_32) == 2
        assert enumerate_space(HFlip(1.0), SHAPE_32) == 2


class TestExpandBatch:
    def _batch(self, b=2, shape=(1, 8, 8)):
        imgs = np.stack([np.full(shape, (n + 1) / (b + 1)) for n in range(b)])
        return imgs, np.arange(b) % 2

    def test_single_replica_identity_is_bit_identical(self):
        imgs, labels = self._batch()
        out, out_labels = expand_batch(Identity(), imgs, labels, 1, RngStream(0))
        assert out.tobytes() == imgs.tobytes()
        assert np.array_equal(out_labels, labels)

    def test_replica_major_layout(self):
        imgs, labels = self._batch(b=2)
        out, out_labels = expand_batch(Identity(), imgs, labels, 3, RngStream(0))
        assert out.shape[0] == 6
        for j in range(3):
            for n in range(2):
                assert np.array_equal(out[j * 2 + n], imgs[n])
        assert np.array_equal(out_labels, np.tile(labels, 3))

    def test_every_contiguous_block_holds_distinct_samples(self):
        imgs, labels = self._batch(b=4)
        out, _ = expand_batch(Identity(), imgs, labels, 5, RngStream(1))
        for j in range(5):
            block = out[j * 4:(j + 1) * 4]
            means = {float(x.mean()) for x in block}
            assert len(means) == 4

    def test_draws_match_sequential_draw_apply(self):
        spec = Compose((PadCrop(2), HFlip(0.5)))
        imgs = RngStream(7).uniform((3, 1, 8, 8))
        labels = np.array([0, 1, 2])
        out, _ = expand_batch(spec, imgs, labels, 2, RngStream(33))
        stream = RngStream(33)
        for j in range(2):
            for n in range(3):
                d = draw_transform(spec, imgs.shape[1:], stream)
                assert out[j * 3 + n].tobytes() == apply(d, imgs[n]).tobytes()

    def test_replica_draws_rarely_coincide(self):
        spec = PadCrop(4)
        img = RngStream(8).uniform((1, 1, 32, 32))
        for seed in range(100):
            out, _ = expand_batch(spec, img, np.zeros(1, dtype=int), 8,
                                  RngStream(seed))
            distinct = {out[j].tobytes() for j in range(8)}
            assert len(distinct) > 1

    def test_bad_replica_count(self):
        imgs, labels = self._batch()
        with pytest.raises(ContractViolation):
            expand_batch(Identity(), imgs, labels, 0, RngStream(0))


class TestConfigText:
    def test_parse_single_and_compose(self):
        assert parse_transform("padcrop:4") == PadCrop(4)
        spec = parse_transform("padcrop:4,hflip:0.5,cutout:8")
        assert spec == Compose((PadCrop(4), HFlip(0.5), Cutout(8)))

    def test_parse_identity_forms(self):
        assert parse_transform("") == Identity()
        assert parse_transform("identity") == Identity()

    def test_roundtrip_canonical(self):
        for text in ["identity", "padcrop:4", "hflip:0.25",
                     "padcrop:2,hflip:0.5,cutout:8"]:
            assert format_transform(parse_transform(text)) == text

    def test_bad_items_raise_config_error(self):
        with pytest.raises(ConfigError):
            parse_transform("rotate:90")
        with pytest.raises(ConfigError):
            parse_transform("padcrop:x")
        with pytest.raises(ConfigError):
            parse_transform("padcrop:-3")
