import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as npst

from certkv import quantizer
from certkv.quantizer import (dequantize_key_block, dequantize_value_block,
                              quantize_key_block, quantize_value_block,
                              KeyBlockQuant, ValueBlockQuant)


def random_block(rng, b=16, d=32, scale=1.0):
    return (rng.standard_normal((b, d)) * scale).astype(np.float32).astype(np.float64)


class TestKeyQuantization:
    def test_two_point_fit(self):
        # hand evaluation: range 2 over 255 levels, offset 1/255
        q = quantize_key_block(np.array([[-1.0], [1.0]]))
        assert q.scales[0] == 2.0 / 255.0
        assert q.offsets[0] == pytest.approx(1.0 / 255.0, abs=1e-15)
        assert q.codes.ravel().tolist() == [-128, 127]
        recon = dequantize_key_block(q).ravel()
        assert recon == pytest.approx([-1.0, 1.0], abs=1e-14)
        assert np.array_equal(recon.astype(np.float32),
                              np.array([-1.0, 1.0], dtype=np.float32))

    def test_constant_channel_guard(self):
        q = quantize_key_block(np.full((4, 3), 0.5))
        assert np.all(q.codes == 0)
        assert np.all(q.scales == 1.0)
        assert np.array_equal(dequantize_key_block(q), np.full((4, 3), 0.5))

    def test_random_blocks_within_half_step(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            keys = random_block(rng)
            q = quantize_key_block(keys)
            err = np.abs(dequantize_key_block(q) - keys)
            assert np.all(err <= q.scales / 2.0)

    def test_fit_data_never_saturates(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            keys = random_block(rng, scale=10.0 ** rng.uniform(-3, 3))
            q = quantize_key_block(keys)
            raw = np.rint((keys - q.offsets) / q.scales)
            assert raw.min() >= -128 and raw.max() <= 127

    def test_offset_only_reconstruction(self):
        q = KeyBlockQuant(codes=np.zeros((2, 2), dtype=np.int8),
                          scales=np.ones(2), offsets=np.full(2, 0.5),
                          block_index=0)
        assert np.array_equal(dequantize_key_block(q), np.full((2, 2), 0.5))

    def test_quantize_dequantize_fixed_point(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            keys = random_block(rng, b=8, d=16, scale=10.0 ** rng.uniform(-2, 2))
            q1 = quantize_key_block(keys)
            q2 = quantize_key_block(dequantize_key_block(q1))
            assert np.array_equal(q1.codes, q2.codes)

    def test_determinism(self):
        rng = np.random.default_rng(3)
        keys = random_block(rng)
        a = quantize_key_block(keys)
        b = quantize_key_block(keys.copy())
        assert np.array_equal(a.codes, b.codes)
        assert np.array_equal(a.scales, b.scales)
        assert np.array_equal(a.offsets, b.offsets)

    def test_non_finite_rejected_with_channel(self):
        keys = np.zeros((2, 4))
        keys[1, 2] = np.nan
        with pytest.raises(ValueError, match="channel 2"):
            quantize_key_block(keys)

    @given(npst.arrays(np.float32, (8, 6),
                       elements=st.floats(-1e6, 1e6, width=32)))
    @settings(max_examples=300, deadline=None)
    def test_half_step_bound_property(self, keys):
        keys = keys.astype(np.float64)
        q = quantize_key_block(keys)
        assert np.all(q.scales > 0)
        err = np.abs(dequantize_key_block(q) - keys)
        assert np.all(err <= q.scales / 2.0)


class TestValueQuantization:
    def test_single_group_fit(self):
        q, ann = quantize_value_block(np.array([[0.0, 1.5]]), 2)
        assert q.group_scales.ravel()[0] == pytest.approx(0.1, abs=1e-15)
        assert q.group_offsets.ravel()[0] == 0.0
        assert q.codes.ravel().tolist() == [0, 15]
        assert dequantize_value_block(q).ravel() == pytest.approx([0.0, 1.5])
        assert ann.eta == 0.0

    def test_zero_values_zero_annotations(self):
        q, ann = quantize_value_block(np.zeros((4, 8)), 4)
        assert ann.eta == 0.0
        assert ann.nu == 0.0
        assert np.array_equal(dequantize_value_block(q), np.zeros((4, 8)))

    def test_eta_matches_recomputation(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            vals = random_block(rng, b=8, d=16, scale=3.0)
            q, ann = quantize_value_block(vals, 4)
            diff = dequantize_value_block(q) - vals
            eta = np.sqrt(np.sum(diff * diff, axis=-1)).max()
            nu = np.sqrt(np.sum(vals * vals, axis=-1)).max()
            assert ann.eta == eta  # same canonical evaluation order, 0 ulp
            assert ann.nu == nu

    def test_constant_group_guard_and_scale_zero_dequant(self):
        q, ann = quantize_value_block(np.full((2, 4), 0.25), 4)
        assert np.all(q.codes == 0)
        assert np.array_equal(dequantize_value_block(q), np.full((2, 4), 0.25))
        assert ann.eta == 0.0
        # externally built payloads may carry zero scales; dequantization is
        # plain affine and must not choke
        ext = ValueBlockQuant(codes=np.full((1, 2), 8, dtype=np.uint8),
                              group_scales=np.zeros((1, 1)),
                              group_offsets=np.full((1, 1), 0.25),
                              group_size=2)
        assert np.array_equal(dequantize_value_block(ext), np.full((1, 2), 0.25))

    def test_half_step_bound_random(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            vals = random_block(rng, b=8, d=16, scale=10.0 ** rng.uniform(-2, 2))
            q, _ = quantize_value_block(vals, 8)
            err = np.abs(dequantize_value_block(q) - vals)
            bound = np.repeat(q.group_scales, q.group_size, axis=-1) / 2.0
            assert np.all(err <= bound)

    def test_group_size_must_divide(self):
        with pytest.raises(ValueError, match="does not divide"):
            quantize_value_block(np.zeros((2, 6)), 4)

    def test_codes_fit_in_nibbles(self):
        rng = np.random.default_rng(6)
        q, _ = quantize_value_block(random_block(rng, 16, 32), 16)
        assert q.codes.dtype == np.uint8
        assert q.codes.min() >= 0 and q.codes.max() <= 15

    @given(npst.arrays(np.float32, (4, 8),
                       elements=st.floats(-1e5, 1e5, width=32)),
           st.sampled_from([2, 4, 8]))
    @settings(max_examples=300, deadline=None)
    def test_value_bound_property(self, vals, g):
        vals = vals.astype(np.float64)
        q, ann = quantize_value_block(vals, g)
        err = np.abs(dequantize_value_block(q) - vals)
        bound = np.repeat(q.group_scales, g, axis=-1) / 2.0
        assert np.all(err <= bound)
        assert ann.eta >= 0 and ann.nu >= 0
