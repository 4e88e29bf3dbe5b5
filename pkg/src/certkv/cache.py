"""Two-tier block-organised KV store with scratch caches and byte accounting.

Tier 1 holds the quantized payloads (INT8 keys, INT4 values, per-block
metadata and annotations) that the fast attention path consumes.  Tier 2
retains the float32 originals of every full block; they are the ground truth
for promoted-block scoring, the dense fallback and every oracle.  Appended
tokens accumulate in a trailing partial block that stays at reference
precision and is quantized atomically once it reaches the block size, so
block metadata is immutable after fill.

Byte accounting follows the logical storage widths (FP16 originals, FP32 key
metadata, FP16 value metadata, packed nibbles) regardless of the in-memory
representation; see ``storage_report``.

Concurrency: single writer per cache instance; any number of readers between
mutations.  The structures handed to the attention engine are append-only and
never mutated in place.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import quantizer
from .quantizer import BlockAnnotations, KeyBlockQuant, ValueBlockQuant


class Tier2UnavailableError(RuntimeError):
    """Raised when full-precision originals are required but missing.

    This is the hard-error path: without Tier-2 the dense fallback cannot
    run and no output with unknown error may be returned.
    """


class PagingError(RuntimeError):
    """A block required by the attend pass was never paged in (a caller bug,
    not a certificate event)."""


@dataclass(frozen=True)
class CacheBlock:
    keys: KeyBlockQuant
    values: ValueBlockQuant
    annotations: BlockAnnotations


class TieredCache:
    """Block-organised store for one KV head."""

    def __init__(self, block_size, head_dim, group_size=16, ingest_binary16=False):
        if head_dim % group_size != 0:
            raise ValueError(
                f"group size {group_size} does not divide head dim {head_dim}")
        self.block_size = int(block_size)
        self.head_dim = int(head_dim)
        self.group_size = int(group_size)
        self.ingest_binary16 = bool(ingest_binary16)
        self.blocks = []
        self.tier2_keys = []
        self.tier2_values = []
        self._partial_keys = []
        self._partial_values = []
        self.v_max = 0.0
        # derived, immutable-per-block state rebuilt lazily after appends
        self._deq_keys64 = []
        self._deq_values32 = []
        self._tier2_keys64 = []
        self._deq_key_matrix = None
        self._tier2_key_matrix = None
        self._tier2_value_matrix = None

    # -- writes ---------------------------------------------------------

    def _ingest(self, vec, what):
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.shape[0] != self.head_dim:
            raise ValueError(f"{what} has length {vec.shape[0]}, expected {self.head_dim}")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"non-finite {what} entry")
        if self.ingest_binary16:
            vec = vec.astype(np.float16)
        return vec.astype(np.float32)

    def append_token(self, key, value):
        """Add one token; fills a block atomically at the boundary."""
        self._partial_keys.append(self._ingest(key, "key"))
        self._partial_values.append(self._ingest(value, "value"))
        if len(self._partial_keys) == self.block_size:
            self._fill_block()

    def append_tokens(self, keys, values):
        """Bulk append (prefill); rows are tokens."""
        keys = np.atleast_2d(np.asarray(keys))
        values = np.atleast_2d(np.asarray(values))
        if keys.shape != values.shape:
            raise ValueError("keys and values must have matching shapes")
        for k, v in zip(keys, values):
            self.append_token(k, v)

    def _fill_block(self):
        index = len(self.blocks)
        keys32 = np.stack(self._partial_keys)
        values32 = np.stack(self._partial_values)
        kq = quantizer.quantize_key_block(keys32, block_index=index)
        vq, ann = quantizer.quantize_value_block(values32, self.group_size)
        self.blocks.append(CacheBlock(keys=kq, values=vq, annotations=ann))
        self.tier2_keys.append(keys32)
        self.tier2_values.append(values32)
        self.v_max = max(self.v_max, ann.nu)
        self._partial_keys = []
        self._partial_values = []
        self._deq_keys64.append(quantizer.dequantize_key_block(kq))
        self._deq_values32.append(
            quantizer.dequantize_value_block(vq).astype(np.float32))
        self._tier2_keys64.append(keys32.astype(np.float64))
        self._deq_key_matrix = None
        self._tier2_key_matrix = None
        self._tier2_value_matrix = None

    # -- shape ----------------------------------------------------------

    @property
    def num_blocks(self):
        return len(self.blocks)

    @property
    def partial_len(self):
        return len(self._partial_keys)

    @property
    def num_tokens(self):
        return self.num_blocks * self.block_size + self.partial_len

    # -- reads ----------------------------------------------------------

    def _check_tier2(self, index):
        if self.tier2_keys[index] is None or self.tier2_values[index] is None:
            raise Tier2UnavailableError(
                f"full-precision originals for block {index} are unavailable; "
                "cannot serve a fallback or promotion")

    def original_keys32(self, index):
        self._check_tier2(index)
        return self.tier2_keys[index]

    def original_values32(self, index):
        self._check_tier2(index)
        return self.tier2_values[index]

    def original_keys64(self, index):
        self._check_tier2(index)
        return self._tier2_keys64[index]

    def dequantized_keys64(self, index):
        return self._deq_keys64[index]

    def dequantized_values32(self, index):
        return self._deq_values32[index]

    def dequantized_key_matrix(self):
        """All full blocks' dequantized keys, float64 (N_full, d)."""
        if self._deq_key_matrix is None:
            if self.num_blocks:
                self._deq_key_matrix = np.concatenate(self._deq_keys64, axis=0)
            else:
                self._deq_key_matrix = np.empty((0, self.head_dim))
        return self._deq_key_matrix

    def tier2_key_matrix(self):
        """All full blocks' original keys, float64 (N_full, d)."""
        if self._tier2_key_matrix is None:
            for i in range(self.num_blocks):
                self._check_tier2(i)
            if self.num_blocks:
                self._tier2_key_matrix = np.concatenate(self._tier2_keys64, axis=0)
            else:
                self._tier2_key_matrix = np.empty((0, self.head_dim))
        return self._tier2_key_matrix

    def tier2_value_matrix(self):
        """All full blocks' original values, float64 (N_full, d)."""
        if self._tier2_value_matrix is None:
            for i in range(self.num_blocks):
                self._check_tier2(i)
            if self.num_blocks:
                self._tier2_value_matrix = np.concatenate(
                    [v.astype(np.float64) for v in self.tier2_values], axis=0)
            else:
                self._tier2_value_matrix = np.empty((0, self.head_dim))
        return self._tier2_value_matrix

    def partial_key_matrix(self):
        """Pending partial-block keys, float64 (p, d)."""
        if not self._partial_keys:
            return np.empty((0, self.head_dim))
        return np.stack(self._partial_keys).astype(np.float64)

    def partial_value_matrix(self):
        if not self._partial_values:
            return np.empty((0, self.head_dim))
        return np.stack(self._partial_values).astype(np.float64)

    def etas(self):
        return np.array([b.annotations.eta for b in self.blocks])

    def invalidate_derived(self):
        """Rebuild dequantized/widened views from stored payloads.

        Only fault-injection tests need this: honest mutation never touches a
        filled block, so the derived views normally stay valid forever.
        """
        self._deq_keys64 = [quantizer.dequantize_key_block(b.keys) for b in self.blocks]
        self._deq_values32 = [
            quantizer.dequantize_value_block(b.values).astype(np.float32)
            for b in self.blocks
        ]
        self._tier2_keys64 = [
            None if k is None else k.astype(np.float64) for k in self.tier2_keys
        ]
        self._deq_key_matrix = None
        self._tier2_key_matrix = None
        self._tier2_value_matrix = None


# -- scratch cache -------------------------------------------------------


@dataclass
class PageInReport:
    """Accounting outcome of one promotion request."""

    hits: int = 0
    misses: int = 0
    bytes: int = 0
    payloads: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        return {"hits": self.hits, "misses": self.misses, "bytes": self.bytes}


class ScratchCache:
    """Bounded LRU cache of promoted full-precision block payloads.

    Admission is unconditional; eviction is strictly least-recently-used.
    ``bytes_paged_in`` grows by the logical FP16 payload size of every miss.
    A zero-capacity cache still serves requests (the transfer happens), it
    just retains nothing.
    """

    def __init__(self, capacity):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = int(capacity)
        self.resident = OrderedDict()
        self.hits = 0
        self.misses = 0
        self.bytes_paged_in = 0

    def request(self, indices, loader, bytes_per_block):
        """Make ``indices`` available, paging in misses via ``loader``.

        Indices are processed in ascending order for determinism.  Returns a
        :class:`PageInReport` whose ``payloads`` maps every requested index to
        its full-precision array.
        """
        report = PageInReport()
        for index in sorted(set(int(i) for i in indices)):
            if index in self.resident:
                self.resident.move_to_end(index)
                report.hits += 1
                report.payloads[index] = self.resident[index]
                continue
            payload = loader(index)
            report.misses += 1
            report.bytes += bytes_per_block
            report.payloads[index] = payload
            if self.capacity > 0:
                self.resident[index] = payload
                while len(self.resident) > self.capacity:
                    self.resident.popitem(last=False)
        self.hits += report.hits
        self.misses += report.misses
        self.bytes_paged_in += report.bytes
        return report

    @property
    def hit_rate(self):
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


def promote_blocks(scratch, cache, indices, payload_kind):
    """Page full-precision payloads for ``indices`` into ``scratch``.

    ``payload_kind`` selects "keys" or "values".  Per-miss cost is the FP16
    payload size B*d*2 bytes.  Indices must refer to full blocks.
    """
    indices = [int(i) for i in indices]
    for i in indices:
        if i < 0 or i >= cache.num_blocks:
            raise ValueError(f"block {i} is not a full block "
                             f"(cache has {cache.num_blocks})")
    if payload_kind == "keys":
        loader = cache.original_keys32
    elif payload_kind == "values":
        loader = cache.original_values32
    else:
        raise ValueError(f"unknown payload kind {payload_kind!r}")
    bytes_per_block = cache.block_size * cache.head_dim * 2
    return scratch.request(indices, loader, bytes_per_block)


# -- storage accounting ---------------------------------------------------


@dataclass(frozen=True)
class StorageReport:
    """Per-token byte costs of the compressed tier vs the dense layout.

    Component widths: INT8 key codes (d), FP32 per-channel key scale/offset
    pairs amortised over the block (8d/B), packed INT4 value codes (d/2),
    FP16 per-group value scale/offset pairs (4d/g), and the per-block error
    annotation float amortised to 4/B.  The headline total and ratio follow
    the four main components; the sub-byte annotation cost is reported
    separately and included in ``tier1_exact_bytes``.
    """

    head_dim: int
    block_size: int
    group_size: int
    key_codes_bytes: float
    key_metadata_bytes: float
    value_codes_bytes: float
    value_metadata_bytes: float
    annotation_bytes: float
    tier1_total_bytes: float
    tier1_exact_bytes: float
    dense_bytes: float
    tier1_ratio: float

    def to_dict(self):
        return {
            "head_dim": self.head_dim,
            "block_size": self.block_size,
            "group_size": self.group_size,
            "key_codes_bytes": self.key_codes_bytes,
            "key_metadata_bytes": self.key_metadata_bytes,
            "value_codes_bytes": self.value_codes_bytes,
            "value_metadata_bytes": self.value_metadata_bytes,
            "annotation_bytes": self.annotation_bytes,
            "tier1_total_bytes": self.tier1_total_bytes,
            "tier1_exact_bytes": self.tier1_exact_bytes,
            "dense_bytes": self.dense_bytes,
            "tier1_ratio": self.tier1_ratio,
        }


def storage_table(head_dim, block_size, group_size):
    """Evaluate the per-token storage components for a configuration."""
    d, b, g = float(head_dim), float(block_size), float(group_size)
    key_codes = d
    key_meta = 8.0 * d / b
    value_codes = d / 2.0
    value_meta = 4.0 * d / g
    annotation = 4.0 / b
    total = key_codes + key_meta + value_codes + value_meta
    dense = 4.0 * d
    return StorageReport(
        head_dim=int(head_dim),
        block_size=int(block_size),
        group_size=int(group_size),
        key_codes_bytes=key_codes,
        key_metadata_bytes=key_meta,
        value_codes_bytes=value_codes,
        value_metadata_bytes=value_meta,
        annotation_bytes=annotation,
        tier1_total_bytes=total,
        tier1_exact_bytes=total + annotation,
        dense_bytes=dense,
        tier1_ratio=total / dense,
    )


def storage_report(cache):
    """Storage components for a live cache's configuration."""
    return storage_table(cache.head_dim, cache.block_size, cache.group_size)
