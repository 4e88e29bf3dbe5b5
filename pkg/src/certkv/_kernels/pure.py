"""Pure-NumPy implementations of the hot attention kernels.

These mirror ``certkv._kernels._core`` (the compiled Cython backend).  The two
backends compute the same quantities with the same accumulation discipline
(float64 block statistics, float32 online-softmax state), but may differ in
the last ulp because libm and NumPy round transcendentals independently.
Every invariant the package tests is within-backend; cross-backend agreement
is checked to 1e-5 by the kernel benchmark and the parity tests.
"""

import numpy as np

NAME = "pure"


def block_logmass(scores, bounds):
    """Per-block max, exp-sum and log-mass of a flat token-score vector.

    ``scores`` is float64 of length T, ``bounds`` an int64 vector of block
    boundaries (``bounds[0] == 0``, ``bounds[-1] == T``, no empty blocks).
    Returns ``(block_max, block_sum, log_mass)`` as float64 arrays of length
    ``len(bounds) - 1``.  The exp-sum is stabilised by the block max, so
    ``block_sum >= 1`` for every block.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    bounds = np.ascontiguousarray(bounds, dtype=np.int64)
    nb = bounds.shape[0] - 1
    if nb <= 0:
        empty = np.empty(0, dtype=np.float64)
        return empty, empty.copy(), empty.copy()
    starts = bounds[:-1]
    block_max = np.maximum.reduceat(scores, starts)
    rep = np.repeat(block_max, np.diff(bounds))
    block_sum = np.add.reduceat(np.exp(scores - rep), starts)
    log_mass = block_max + np.log(block_sum)
    return block_max, block_sum, log_mass


def fused_attend(scores, values, bounds):
    """Single-pass online-softmax attend over blocks with float32 state.

    ``scores`` is float32 of length T, ``values`` float32 of shape (T, d) and
    ``bounds`` the block boundaries as in :func:`block_logmass`.  Maintains
    the running max ``m``, weight sum ``l`` and output accumulator ``o`` in
    float32 and returns ``(output, m_final, l_final)`` where
    ``output = o / l``.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float32)
    values = np.ascontiguousarray(values, dtype=np.float32)
    bounds = np.ascontiguousarray(bounds, dtype=np.int64)
    nb = bounds.shape[0] - 1
    d = values.shape[1]
    m = np.float32(-np.inf)
    l = np.float32(0.0)
    o = np.zeros(d, dtype=np.float32)
    for i in range(nb):
        lo, hi = bounds[i], bounds[i + 1]
        s = scores[lo:hi]
        m_new = max(m, np.float32(s.max()))
        p = np.exp(s - m_new)
        # exp(-inf) = 0 handles the first block without a special case
        scale = np.exp(np.float32(m - m_new))
        l = np.float32(l * scale + p.sum(dtype=np.float32))
        o = o * scale + p @ values[lo:hi]
        m = m_new
    return o / l, m, l
