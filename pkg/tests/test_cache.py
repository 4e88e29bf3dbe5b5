import hashlib

import numpy as np
import pytest

from certkv.cache import (ScratchCache, Tier2UnavailableError, TieredCache,
                          promote_blocks, storage_report, storage_table)


def build_cache(n_tokens, d=8, block=16, seed=0, ingest_binary16=False):
    rng = np.random.default_rng(seed)
    cache = TieredCache(block, d, group_size=4, ingest_binary16=ingest_binary16)
    cache.append_tokens(rng.standard_normal((n_tokens, d)).astype(np.float32),
                        rng.standard_normal((n_tokens, d)).astype(np.float32))
    return cache


class TestAppend:
    def test_below_block_boundary(self):
        cache = build_cache(15)
        assert cache.num_blocks == 0
        assert cache.partial_len == 15

    def test_exact_boundary_fills_block(self):
        cache = build_cache(16)
        assert cache.num_blocks == 1
        assert cache.partial_len == 0
        ann = cache.blocks[0].annotations
        assert ann.eta >= 0 and ann.nu > 0
        assert cache.v_max == ann.nu

    def test_metadata_immutable_across_fills(self):
        cache = build_cache(17)

        def digest():
            b = cache.blocks[0]
            h = hashlib.sha256()
            for arr in (b.keys.codes, b.keys.scales, b.keys.offsets,
                        b.values.codes, b.values.group_scales,
                        b.values.group_offsets):
                h.update(np.ascontiguousarray(arr).tobytes())
            return h.hexdigest()

        before = digest()
        rng = np.random.default_rng(9)
        for _ in range(16):
            cache.append_token(rng.standard_normal(8), rng.standard_normal(8))
        assert cache.num_blocks == 2
        assert digest() == before

    def test_33_tokens(self):
        cache = build_cache(33)
        assert cache.num_blocks == 2
        assert cache.partial_len == 1
        assert cache.num_tokens == 33

    def test_non_finite_rejected(self):
        cache = TieredCache(4, 2)
        with pytest.raises(ValueError, match="non-finite"):
            cache.append_token([np.inf, 0.0], [0.0, 0.0])

    def test_tier2_returns_exact_appended_values(self):
        rng = np.random.default_rng(1)
        keys = rng.standard_normal((16, 8)).astype(np.float32)
        vals = rng.standard_normal((16, 8)).astype(np.float32)
        cache = TieredCache(16, 8, group_size=4)
        cache.append_tokens(keys, vals)
        assert np.array_equal(cache.original_keys32(0), keys)
        assert np.array_equal(cache.original_values32(0), vals)

    def test_binary16_ingest_rounds_before_storage(self):
        cache = TieredCache(4, 2, group_size=2, ingest_binary16=True)
        cache.append_token([0.1, 0.2], [0.3, 0.4])
        stored = cache.partial_key_matrix()[0]
        assert stored[0] == np.float32(np.float16(0.1))
        assert stored[0] != np.float32(0.1)

    def test_v_max_tracks_annotations(self):
        cache = build_cache(64)
        assert cache.v_max == max(b.annotations.nu for b in cache.blocks)


class TestScratch:
    def test_warm_cache_all_hits(self):
        cache = build_cache(64)
        scratch = ScratchCache(16)
        promote_blocks(scratch, cache, range(4), "keys")
        report = promote_blocks(scratch, cache, range(4), "keys")
        assert report.hits == 4 and report.misses == 0 and report.bytes == 0

    def test_lru_trace(self):
        cache = build_cache(64)
        scratch = ScratchCache(2)
        promote_blocks(scratch, cache, [0, 1], "keys")
        promote_blocks(scratch, cache, [2], "keys")  # evicts 0
        report = promote_blocks(scratch, cache, [0], "keys")
        assert report.misses == 1

    def test_miss_bytes_fp16_payload(self):
        cache = TieredCache(16, 128)
        rng = np.random.default_rng(0)
        cache.append_tokens(rng.standard_normal((16, 128)).astype(np.float32),
                            rng.standard_normal((16, 128)).astype(np.float32))
        report = promote_blocks(ScratchCache(4), cache, [0], "keys")
        assert report.bytes == 16 * 128 * 2 == 4096

    def test_zero_capacity_still_serves(self):
        cache = build_cache(64)
        scratch = ScratchCache(0)
        r1 = promote_blocks(scratch, cache, [0, 1], "keys")
        r2 = promote_blocks(scratch, cache, [0, 1], "keys")
        assert r1.misses == r2.misses == 2
        assert set(r1.payloads) == {0, 1}
        assert scratch.hit_rate == 0.0

    def test_out_of_range_rejected(self):
        cache = build_cache(32)
        with pytest.raises(ValueError, match="not a full block"):
            promote_blocks(ScratchCache(4), cache, [2], "keys")

    def test_value_payloads(self):
        cache = build_cache(32)
        report = promote_blocks(ScratchCache(4), cache, [1], "values")
        assert np.array_equal(report.payloads[1], cache.original_values32(1))

    def test_counters_accumulate(self):
        cache = build_cache(64)
        scratch = ScratchCache(2)
        promote_blocks(scratch, cache, [0, 1], "keys")
        promote_blocks(scratch, cache, [2, 3], "keys")
        assert scratch.misses == 4
        assert scratch.bytes_paged_in == 4 * 16 * 8 * 2

    def test_tier2_deletion_is_hard_error(self):
        cache = build_cache(32)
        cache.tier2_keys[0] = None
        with pytest.raises(Tier2UnavailableError):
            promote_blocks(ScratchCache(4), cache, [0], "keys")


class TestStorage:
    def test_reference_configuration(self):
        r = storage_table(128, 16, 16)
        assert r.key_codes_bytes == 128
        assert r.key_metadata_bytes == 64
        assert r.value_codes_bytes == 64
        assert r.value_metadata_bytes == 32
        assert 0 < r.annotation_bytes < 1
        assert r.tier1_total_bytes == 288
        assert r.dense_bytes == 512
        assert r.tier1_ratio == 0.5625
        assert r.tier1_exact_bytes == 288 + 4 / 16

    def test_dense_is_four_d(self):
        assert storage_table(64, 16, 16).dense_bytes == 256

    def test_d64_components(self):
        r = storage_table(64, 16, 16)
        assert (r.key_codes_bytes, r.key_metadata_bytes, r.value_codes_bytes,
                r.value_metadata_bytes) == (64, 32, 32, 16)
        assert r.tier1_total_bytes == 144

    def test_totals_are_component_sums(self):
        r = storage_table(32, 8, 8)
        parts = (r.key_codes_bytes + r.key_metadata_bytes
                 + r.value_codes_bytes + r.value_metadata_bytes)
        assert r.tier1_total_bytes == parts
        assert r.tier1_exact_bytes == parts + r.annotation_bytes

    def test_report_reads_cache_config(self):
        cache = TieredCache(16, 128, group_size=16)
        assert storage_report(cache).tier1_total_bytes == 288
