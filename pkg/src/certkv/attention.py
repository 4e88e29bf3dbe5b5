"""Two-phase certified attention pipeline and the dense oracle path.

Phase 1 scores every full block on dequantized Tier-1 keys (the trailing
partial block is scored on its originals) and reduces the scores to globally
comparable block log-masses.  The adaptive selector promotes the smallest
mass-descending prefix of blocks that covers the configured fraction of
estimated attention mass, clamped to the configured bounds.  Phase 2 makes a
single pass over all blocks with mask-gated key precision (originals for
promoted blocks, dequantized codes for the tail) and a float32 online-softmax
accumulator; per-block masses and promoted-block reference log-masses fall
out as byproducts for the certifier and the runtime monitors.

Scoring arithmetic: per-token scores are float64 dot products of float64
inputs divided by sqrt(d), computed by one canonical helper everywhere, so
equal input rows give bit-identical scores across phases and oracles.  Only
the Phase-2 accumulator state (m, l, o) runs at float32; the dense oracle
keeps 64-bit intermediates end to end.

All operations are pure over the cache snapshot; nothing here mutates it.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .cache import PagingError


class EmptyCacheError(ValueError):
    """Attention over an empty cache is undefined."""


def score_rows(rows64, query64, head_dim):
    """Canonical scoring: rows @ query / sqrt(d), all float64."""
    if rows64.shape[0] == 0:
        return np.empty(0, dtype=np.float64)
    return rows64 @ query64 / np.sqrt(head_dim)


def logsumexp(x):
    if x.size == 0:
        return -np.inf
    m = x.max()
    return float(m + np.log(np.sum(np.exp(x - m))))


def _as_query64(query, head_dim):
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != head_dim:
        raise ValueError(f"query has length {q.shape[0]}, expected {head_dim}")
    return q


def _block_bounds(num_blocks, block_size, partial_len=0):
    bounds = [i * block_size for i in range(num_blocks + 1)]
    if partial_len:
        bounds.append(bounds[-1] + partial_len)
    return np.asarray(bounds, dtype=np.int64)


@dataclass(frozen=True)
class BlockScores:
    """Phase-1 scoring result.

    ``token_scores`` covers the full blocks in block order; ``block_bounds``
    delimits them.  ``partial_scores`` holds the trailing partial block's
    scores (scored on originals), with ``partial_log_mass`` its log-mass or
    None when there is no partial.
    """

    token_scores: np.ndarray
    block_bounds: np.ndarray
    block_max: np.ndarray
    block_sum: np.ndarray
    log_mass: np.ndarray
    partial_scores: np.ndarray
    partial_log_mass: float | None

    @property
    def num_blocks(self):
        return self.log_mass.shape[0]

    def scores_for_block(self, index):
        lo, hi = self.block_bounds[index], self.block_bounds[index + 1]
        return self.token_scores[lo:hi]


def phase1_score(query, cache):
    """Score the whole cache on its quantized representation."""
    if cache.num_tokens == 0:
        raise EmptyCacheError("cannot score an empty cache")
    q = _as_query64(query, cache.head_dim)
    token_scores = score_rows(cache.dequantized_key_matrix(), q, cache.head_dim)
    bounds = _block_bounds(cache.num_blocks, cache.block_size)
    kern = _kernels.get_backend()
    block_max, block_sum, log_mass = kern.block_logmass(token_scores, bounds)
    partial_scores = score_rows(cache.partial_key_matrix(), q, cache.head_dim)
    if partial_scores.size:
        _, _, plm = kern.block_logmass(
            partial_scores, np.asarray([0, partial_scores.size], dtype=np.int64))
        partial_log_mass = float(plm[0])
    else:
        partial_log_mass = None
    return BlockScores(
        token_scores=token_scores,
        block_bounds=bounds,
        block_max=block_max,
        block_sum=block_sum,
        log_mass=log_mass,
        partial_scores=partial_scores,
        partial_log_mass=partial_log_mass,
    )


@dataclass(frozen=True)
class SelectionDecision:
    """Adaptive top-K outcome.

    ``normalized_masses`` are the estimated per-block masses over full blocks,
    normalized together with the partial block's mass (``partial_mass``); the
    partial block is always served at reference precision and is never a
    selection candidate.  ``est_tail_mass`` is the summed mass of the
    non-promoted full blocks (exactly zero when everything is promoted).
    ``k_coverage`` is the pre-clamp coverage-minimal K.
    """

    promoted: frozenset
    k_star: int
    est_tail_mass: float
    clamped: bool
    normalized_masses: np.ndarray
    partial_mass: float
    k_coverage: int
    order: np.ndarray

    @property
    def tail(self):
        return np.asarray(
            [b for b in range(self.normalized_masses.shape[0])
             if b not in self.promoted],
            dtype=np.int64,
        )


def _decision_for_k(k, order, masses, partial_mass, k_coverage, clamped):
    promoted = frozenset(int(b) for b in order[:k])
    tail = order[k:]
    est_tail = float(masses[tail].sum()) if tail.size else 0.0
    return SelectionDecision(
        promoted=promoted,
        k_star=int(k),
        est_tail_mass=est_tail,
        clamped=clamped,
        normalized_masses=masses,
        partial_mass=partial_mass,
        k_coverage=int(k_coverage),
        order=order,
    )


def adaptive_topk(scores, tau_cov, k_min, k_max):
    """Pick the promoted set: smallest mass-descending prefix covering
    ``tau_cov`` of estimated mass, clamped to [k_min, min(k_max, #blocks)].

    Ties in mass break toward the lower block index.  The always-promoted
    partial block counts toward coverage.
    """
    nb = scores.num_blocks
    all_lm = list(scores.log_mass)
    if scores.partial_log_mass is not None:
        all_lm.append(scores.partial_log_mass)
    lse = logsumexp(np.asarray(all_lm, dtype=np.float64))
    masses = np.exp(scores.log_mass - lse)
    partial_mass = (
        float(np.exp(scores.partial_log_mass - lse))
        if scores.partial_log_mass is not None
        else 0.0
    )
    if nb == 0:
        return _decision_for_k(
            0, np.empty(0, dtype=np.int64), masses, partial_mass, 0, False)
    order = np.lexsort((np.arange(nb), -masses))
    cumulative = partial_mass + np.cumsum(masses[order])
    covered = np.nonzero(cumulative >= tau_cov)[0]
    k_coverage = int(covered[0]) + 1 if covered.size else nb
    k = min(max(k_coverage, k_min), min(k_max, nb))
    return _decision_for_k(k, order, masses, partial_mass, k_coverage,
                           clamped=(k != k_coverage))


def expand_promotion(decision, k_new):
    """Re-cut the promoted set at ``k_new`` along the original mass order."""
    nb = decision.normalized_masses.shape[0]
    k_new = min(int(k_new), nb)
    return _decision_for_k(
        k_new,
        decision.order,
        decision.normalized_masses,
        decision.partial_mass,
        decision.k_coverage,
        decision.clamped,
    )


@dataclass(frozen=True)
class AttendResult:
    """Phase-2 output and its certificate byproducts.

    ``block_masses`` are the achieved per-full-block attention masses under
    the Phase-2 score set (float64 path); together with ``partial_mass`` they
    sum to 1.  ``promoted_log_masses`` maps each promoted block to its
    reference-key log-mass; ``token_scores`` retains the Phase-2 per-token
    scores for the runtime monitors.  ``accumulator_trace`` is the final
    float32 (m, l) online-softmax state.
    """

    output: np.ndarray
    block_masses: np.ndarray
    partial_mass: float
    promoted_log_masses: dict
    log_mass: np.ndarray
    token_scores: np.ndarray
    accumulator_trace: tuple


def phase2_attend(query, cache, decision, value_promotions,
                  key_payloads=None, value_payloads=None):
    """Mask-gated fused attend over all blocks in one pass.

    Keys come from originals for promoted blocks and from dequantized Tier-1
    codes otherwise; values come from originals for ``value_promotions`` and
    from dequantized INT4 codes otherwise.  The partial block always uses
    originals.  When payload mappings are given (the paged-in working set),
    every promoted block must be present in them; a missing entry is a paging
    bug, not a certificate event.
    """
    if cache.num_tokens == 0:
        raise EmptyCacheError("cannot attend over an empty cache")
    q = _as_query64(query, cache.head_dim)
    nb = cache.num_blocks
    promoted = decision.promoted
    value_promotions = frozenset(int(b) for b in value_promotions)

    def _paged(payloads, index, kind):
        if index not in payloads:
            raise PagingError(
                f"promoted block {index} ({kind}) was never paged in")
        return payloads[index]

    token_scores = score_rows(cache.dequantized_key_matrix(), q, cache.head_dim)
    for b in sorted(promoted):
        lo = b * cache.block_size
        if key_payloads is None:
            rows = cache.original_keys64(b)
        else:
            rows = _paged(key_payloads, b, "keys").astype(np.float64)
        token_scores[lo:lo + cache.block_size] = score_rows(rows, q, cache.head_dim)

    value_rows = []
    for b in range(nb):
        if b in value_promotions:
            if value_payloads is None:
                value_rows.append(cache.original_values32(b))
            else:
                value_rows.append(_paged(value_payloads, b, "values"))
        else:
            value_rows.append(cache.dequantized_values32(b))

    partial_scores = score_rows(cache.partial_key_matrix(), q, cache.head_dim)
    partial_len = partial_scores.size
    if partial_len:
        value_rows.append(cache.partial_value_matrix().astype(np.float32))

    all_scores = np.concatenate([token_scores, partial_scores])
    values = (np.concatenate(value_rows, axis=0, dtype=np.float32)
              if value_rows else np.empty((0, cache.head_dim), dtype=np.float32))
    bounds = _block_bounds(nb, cache.block_size, partial_len)

    kern = _kernels.get_backend()
    output, m_final, l_final = kern.fused_attend(
        all_scores.astype(np.float32), values, bounds)
    _, _, log_mass_all = kern.block_logmass(all_scores, bounds)
    lse = logsumexp(log_mass_all)
    masses_all = np.exp(log_mass_all - lse)
    if partial_len:
        block_masses, partial_mass = masses_all[:-1], float(masses_all[-1])
        log_mass = log_mass_all[:-1]
    else:
        block_masses, partial_mass = masses_all, 0.0
        log_mass = log_mass_all
    return AttendResult(
        output=output,
        block_masses=block_masses,
        partial_mass=partial_mass,
        promoted_log_masses={int(b): float(log_mass[b]) for b in sorted(promoted)},
        log_mass=log_mass,
        token_scores=all_scores,
        accumulator_trace=(m_final, l_final),
    )


def full_promotion_decision(cache):
    """A decision promoting every full block (zero estimated tail)."""
    nb = cache.num_blocks
    masses = np.full(nb, 1.0 / nb) if nb else np.empty(0)
    return SelectionDecision(
        promoted=frozenset(range(nb)),
        k_star=nb,
        est_tail_mass=0.0,
        clamped=False,
        normalized_masses=masses,
        partial_mass=0.0,
        k_coverage=nb,
        order=np.arange(nb, dtype=np.int64),
    )


def ref_attention(query, cache):
    """Reference output: the identical fused kernel with every block promoted
    for both keys and values."""
    decision = full_promotion_decision(cache)
    return phase2_attend(query, cache, decision,
                         value_promotions=range(cache.num_blocks)).output


def dense_attention(query, cache):
    """Dense oracle: straightforward two-pass softmax attention over the
    float32 originals with 64-bit intermediates.  This is the fallback output
    and the test ground truth."""
    if cache.num_tokens == 0:
        raise EmptyCacheError("cannot attend over an empty cache")
    q = _as_query64(query, cache.head_dim)
    scores = np.concatenate([
        score_rows(cache.tier2_key_matrix(), q, cache.head_dim),
        score_rows(cache.partial_key_matrix(), q, cache.head_dim),
    ])
    weights = np.exp(scores - scores.max())
    weights /= weights.sum()
    values = np.concatenate(
        [cache.tier2_value_matrix(), cache.partial_value_matrix()], axis=0)
    return weights @ values


def scaled_query_score(query, key_block):
    """Block scores straight from INT8 codes: the scaled-query dot product
    plus the per-block offset constant, over sqrt(d).

    Equal to dequantize-then-dot in exact arithmetic; float association
    differs at the 1e-6 relative level.
    """
    q = _as_query64(query, key_block.head_dim)
    scaled_q = q * key_block.scales
    offset_term = q @ key_block.offsets
    return (key_block.codes.astype(np.float64) @ scaled_q + offset_term) / np.sqrt(
        key_block.head_dim)
