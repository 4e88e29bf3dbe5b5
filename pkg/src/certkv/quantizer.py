"""Block quantization for cached keys and values.

Keys use per-channel signed 8-bit affine codes: each channel of a filled
block gets its own scale and offset fitted to the channel min/max, so every
value seen at fit time is representable without clipping and round-to-nearest
gives a half-step reconstruction bound per element.

Values use per-group unsigned 4-bit affine codes: each token's d-dimensional
vector is split into groups of ``g`` channels, each group fitted
independently.  Two 4-bit codes pack into one byte; packing is a storage
accounting contract, the codes are held unpacked in memory.

All fitting and reconstruction arithmetic runs in float64.  Scales and
offsets are kept at float64 in memory (storage accounting still charges the
narrow widths) so the half-step bounds hold with huge slack even for
pathologically narrow channels; with float32 metadata the fitted code range
can overflow by a whole step when a channel's spread is near the float32 ulp
of its offset.

Rounding is round-half-to-even (``np.rint``), followed by a one-step
neighbour refinement that keeps the code whose *computed* reconstruction is
closest.  The refinement matters only when a value sits within a few ulps of
a grid midpoint (float32-discrete inputs hit exact rational midpoints at
observable rates); it guarantees the half-step bound in the same float64
arithmetic that evaluates it, not merely in exact arithmetic.

Error/norm annotations use one canonical evaluation order: square, sum over
channels, sqrt, max over tokens, all in float64.
"""

from dataclasses import dataclass

import numpy as np

INT8_LEVELS = 255  # code range -128..127
INT4_LEVELS = 15  # code range 0..15


@dataclass(frozen=True)
class KeyBlockQuant:
    """Per-channel INT8 payload of one key block.

    ``codes`` is int8 of shape (B, d); ``scales``/``offsets`` are float64 of
    length d with strictly positive scales (constant channels get scale 1 and
    offset equal to the constant, reconstructing exactly).
    """

    codes: np.ndarray
    scales: np.ndarray
    offsets: np.ndarray
    block_index: int

    @property
    def block_size(self):
        return self.codes.shape[0]

    @property
    def head_dim(self):
        return self.codes.shape[1]


@dataclass(frozen=True)
class ValueBlockQuant:
    """Per-group INT4 payload of one value block.

    ``codes`` is uint8 of shape (B, d) holding 0..15 (two logical nibbles per
    byte when packed); ``group_scales``/``group_offsets`` are float64 of shape
    (B, d // g).  Scales are non-negative; the constant-group guard emits
    scale 1, offset equal to the group minimum, codes 0.
    """

    codes: np.ndarray
    group_scales: np.ndarray
    group_offsets: np.ndarray
    group_size: int

    @property
    def block_size(self):
        return self.codes.shape[0]

    @property
    def head_dim(self):
        return self.codes.shape[1]


@dataclass(frozen=True)
class BlockAnnotations:
    """Write-time value annotations of one block.

    ``eta`` is the max per-token L2 reconstruction error, ``nu`` the max
    per-token L2 value norm, both over the block's tokens.
    """

    eta: float
    nu: float


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(np.atleast_2d(arr)))
        channel = int(bad[0][-1])
        raise ValueError(f"non-finite {what} entry in channel {channel}")


def _fit_affine(data, axis, levels):
    """Min/max affine fit along ``axis``: scale = range/levels, offset = min.

    Constant slices get scale 1 so reconstruction from code 0 is exact.
    Returns (scale, offset, lo, hi) with the reduced axis kept.
    """
    lo = data.min(axis=axis, keepdims=True)
    hi = data.max(axis=axis, keepdims=True)
    constant = hi == lo
    scale = np.where(constant, 1.0, (hi - lo) / levels)
    return scale, lo, constant


def _nearest_codes(data, scale, offset, low, high):
    """Round-half-even codes refined one step toward the candidate whose
    computed affine reconstruction is closest to the data."""
    codes = np.rint((data - offset) / scale)
    np.clip(codes, low, high, out=codes)
    best_err = np.abs(data - (codes * scale + offset))
    for step in (-1.0, 1.0):
        cand = np.clip(codes + step, low, high)
        err = np.abs(data - (cand * scale + offset))
        better = err < best_err
        codes = np.where(better, cand, codes)
        best_err = np.where(better, err, best_err)
    return codes


def quantize_key_blocks(keys):
    """Vectorised key fit over shape (..., B, d); returns (codes, scales, offsets).

    Codes are int8 in [-128, 127]; scales/offsets float64 with the trailing
    token axis reduced.  Fit data never clips: the channel min maps to -128
    and the channel max to 127.
    """
    keys = np.asarray(keys, dtype=np.float64)
    scale, lo, constant = _fit_affine(keys, axis=-2, levels=INT8_LEVELS)
    # offset = max - 127*scale, i.e. min + 128*scale; constant channels pin
    # offset to the constant so code 0 reconstructs it exactly
    offset = np.where(constant, lo, lo + 128.0 * scale)
    codes = _nearest_codes(keys, scale, offset, -128.0, 127.0)
    return (
        codes.astype(np.int8),
        np.squeeze(scale, axis=-2),
        np.squeeze(offset, axis=-2),
    )


def quantize_key_block(keys, block_index=0):
    """Fit one B x d key block; see :func:`quantize_key_blocks`."""
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2:
        raise ValueError(f"expected a 2-D block, got shape {keys.shape}")
    _check_finite(keys, "key")
    codes, scales, offsets = quantize_key_blocks(keys)
    return KeyBlockQuant(codes=codes, scales=scales, offsets=offsets,
                         block_index=int(block_index))


def dequantize_key_codes(codes, scales, offsets):
    """Affine reconstruction codes*scale + offset in float64 (vectorised)."""
    return codes.astype(np.float64) * scales[..., None, :] + offsets[..., None, :]


def dequantize_key_block(q):
    """Reconstruct one key block to float64 of shape (B, d).

    Idempotent: re-fitting the reconstruction reproduces identical codes and
    metadata, because the channel extremes land exactly on codes -128/127.
    """
    return dequantize_key_codes(q.codes, q.scales, q.offsets)


def quantize_value_blocks(values, group_size):
    """Vectorised value fit over shape (..., B, d) with channel groups of g.

    Returns (codes uint8 (..., B, d), scales (..., B, d//g), offsets alike).
    """
    values = np.asarray(values, dtype=np.float64)
    d = values.shape[-1]
    if group_size <= 0 or d % group_size != 0:
        raise ValueError(f"group size {group_size} does not divide head dim {d}")
    grouped = values.reshape(values.shape[:-1] + (d // group_size, group_size))
    scale, lo, _ = _fit_affine(grouped, axis=-1, levels=INT4_LEVELS)
    codes = _nearest_codes(grouped, scale, lo, 0.0, 15.0)
    return (
        codes.reshape(values.shape).astype(np.uint8),
        np.squeeze(scale, axis=-1),
        np.squeeze(lo, axis=-1),
    )


def dequantize_value_codes(codes, group_scales, group_offsets, group_size):
    """Per-group affine reconstruction in float64 (vectorised)."""
    shape = codes.shape
    grouped = codes.astype(np.float64).reshape(
        shape[:-1] + (shape[-1] // group_size, group_size)
    )
    recon = grouped * group_scales[..., None] + group_offsets[..., None]
    return recon.reshape(shape)


def value_annotations(values, reconstruction):
    """Write-time annotations from originals and their reconstruction.

    Canonical evaluation order: squared differences summed over the channel
    axis in float64, sqrt, then max over tokens.
    """
    values = np.asarray(values, dtype=np.float64)
    diff = reconstruction - values
    err_norms = np.sqrt(np.sum(diff * diff, axis=-1))
    val_norms = np.sqrt(np.sum(values * values, axis=-1))
    return BlockAnnotations(eta=float(err_norms.max()), nu=float(val_norms.max()))


def quantize_value_block(values, group_size):
    """Fit one B x d value block; returns (ValueBlockQuant, BlockAnnotations)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-D block, got shape {values.shape}")
    _check_finite(values, "value")
    codes, scales, offsets = quantize_value_blocks(values, group_size)
    q = ValueBlockQuant(codes=codes, group_scales=scales, group_offsets=offsets,
                        group_size=int(group_size))
    ann = value_annotations(values, dequantize_value_block(q))
    return q, ann


def dequantize_value_block(q):
    """Reconstruct one value block to float64 of shape (B, d)."""
    return dequantize_value_codes(q.codes, q.group_scales, q.group_offsets,
                                  q.group_size)
