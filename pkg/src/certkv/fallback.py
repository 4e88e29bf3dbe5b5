"""Runtime monitors and the four-rung escalation policy.

Rung 1 widens the promoted key set (one doubling per step, clamped to the
block count).  Rung 2 pages in full-precision values for blocks whose
estimated error contribution crosses the tolerance (or, in greedy mode,
until the projected residual fits a global budget).  Rung 3 recomputes a
single head densely when the ranking or boundary check fails.  Rung 4
recomputes every head densely when the score canary or a spot check detects
a precondition violation; it is always available as long as the Tier-2
originals exist, which is why losing them is a hard error rather than a
certificate event.

Monitors are pure; rung decisions for different heads are independent.
"""

from dataclasses import dataclass, field

import numpy as np

from .attention import dense_attention, expand_promotion, score_rows
from .cache import PageInReport

CAUSE_COVERAGE = "coverage_expand"
CAUSE_VALUE_TOL = "value_tol"
CAUSE_RANKING = "ranking_disagree"
CAUSE_BOUNDARY = "boundary"
CAUSE_CANARY = "canary"
CAUSE_PRECONDITION = "precondition"

_CAUSES = {CAUSE_COVERAGE, CAUSE_VALUE_TOL, CAUSE_RANKING, CAUSE_BOUNDARY,
           CAUSE_CANARY, CAUSE_PRECONDITION}
_RUNG4_CAUSES = {CAUSE_CANARY, CAUSE_PRECONDITION}


@dataclass(frozen=True)
class PolicyConfig:
    """Runtime certificate policy.

    Defaults match the standard operating point; ``epsilon_guard`` defaults
    to the experimental 1e-6 (a conservative 0.01 is a valid setting).
    ``exploration_rate`` may be zero (disabled) or within [0.01, 0.05].
    ``greedy_value_budget`` switches rung 2 from the local per-block
    threshold to greedy promotion until the projected residual value error
    fits the budget.
    """

    tau_cov: float = 0.995
    k_min: int = 2
    k_max: int = 128
    v_tol: float = 0.05
    ranking_depth: int = 1
    epsilon_guard: float = 1e-6
    exploration_rate: float = 0.02
    exponent_mode: int = 3
    greedy_value_budget: float | None = None
    rung1_enabled: bool = True
    rung2_enabled: bool = True
    ranking_checks_enabled: bool = True
    canary_enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.tau_cov <= 1.0:
            raise ValueError("tau_cov must be in [0, 1]")
        if self.k_min < 0 or self.k_max < self.k_min:
            raise ValueError("need 0 <= k_min <= k_max")
        if self.v_tol <= 0:
            raise ValueError("v_tol must be positive")
        if self.ranking_depth < 1:
            raise ValueError("ranking_depth must be at least 1")
        if self.epsilon_guard < 0:
            raise ValueError("epsilon_guard must be non-negative")
        if self.exploration_rate != 0.0 and not 0.01 <= self.exploration_rate <= 0.05:
            raise ValueError("exploration_rate must be 0 or in [0.01, 0.05]")
        if self.exponent_mode not in (2, 3):
            raise ValueError("exponent_mode must be 2 or 3")
        if self.greedy_value_budget is not None and self.greedy_value_budget < 0:
            raise ValueError("greedy_value_budget must be non-negative")

    @classmethod
    def naive(cls):
        """Everything off: uniform quantized execution with no certification.

        Used only as the contrast configuration in adversarial experiments.
        """
        return cls(k_min=0, k_max=0, exploration_rate=0.0, rung1_enabled=False,
                   rung2_enabled=False, ranking_checks_enabled=False,
                   canary_enabled=False)

    def to_dict(self):
        return {
            "tau_cov": self.tau_cov,
            "k_min": self.k_min,
            "k_max": self.k_max,
            "v_tol": self.v_tol,
            "ranking_depth": self.ranking_depth,
            "epsilon_guard": self.epsilon_guard,
            "exploration_rate": self.exploration_rate,
            "exponent_mode": self.exponent_mode,
            "greedy_value_budget": self.greedy_value_budget,
            "rung1_enabled": self.rung1_enabled,
            "rung2_enabled": self.rung2_enabled,
            "ranking_checks_enabled": self.ranking_checks_enabled,
            "canary_enabled": self.canary_enabled,
        }

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls().to_dict())
        if unknown:
            raise ValueError(f"unknown policy fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class FallbackEvent:
    rung: int
    head: int
    step: int
    cause: str

    def __post_init__(self):
        if self.cause not in _CAUSES:
            raise ValueError(f"unknown cause {self.cause!r}")
        if self.rung not in (1, 2, 3, 4):
            raise ValueError(f"rung must be 1..4, got {self.rung}")
        if self.rung == 4 and self.cause not in _RUNG4_CAUSES:
            raise ValueError("rung 4 events are canary or precondition only")

    def to_dict(self):
        return {"rung": self.rung, "head": self.head, "step": self.step,
                "cause": self.cause}


def rung1_expand(decision, scores):
    """Double the promoted count once, clamped to the block count, and
    recompute the estimated tail mass for the widened set."""
    del scores  # the decision already carries the mass ordering
    return expand_promotion(decision, 2 * decision.k_star)


def rung2_value_promotions(est_masses, etas, policy):
    """Choose blocks whose values are served at full precision.

    Default policy: blocks with estimated contribution rho_hat * eta above
    ``v_tol``.  Greedy mode: promote in descending contribution until the
    projected residual sum fits ``greedy_value_budget``.
    """
    est_masses = np.asarray(est_masses, dtype=np.float64)
    etas = np.asarray(etas, dtype=np.float64)
    contributions = est_masses * etas
    if policy.greedy_value_budget is None:
        return frozenset(int(b) for b in np.nonzero(contributions > policy.v_tol)[0])
    order = np.lexsort((np.arange(contributions.shape[0]), -contributions))
    residual = float(contributions.sum())
    promoted = []
    for b in order:
        if residual <= policy.greedy_value_budget:
            break
        promoted.append(int(b))
        residual -= float(contributions[b])
    return frozenset(promoted)


def _top_r(log_masses, r):
    """Indices of the r largest log-masses, ties toward the lower index."""
    items = sorted(log_masses.items(), key=lambda kv: (-kv[1], kv[0]))
    return [b for b, _ in items[:r]]


def ranking_consistency(log_masses_ref, log_masses_quant, r):
    """True iff the top-r block orderings agree between the reference-key and
    quantized-key log-masses over the promoted set."""
    if set(log_masses_ref) != set(log_masses_quant):
        raise ValueError("the two log-mass maps must cover the same blocks")
    if len(log_masses_ref) < r:
        raise ValueError(f"need at least r={r} promoted blocks, "
                         f"have {len(log_masses_ref)}")
    return _top_r(log_masses_ref, r) == _top_r(log_masses_quant, r)


def boundary_check(tail_log_masses, delta_h, promoted_rth_log_mass):
    """True iff no tail block's upper-bounded reference log-mass could reach
    the r-th promoted block: fails when any tail value + delta exceeds it."""
    tail = np.asarray(tail_log_masses, dtype=np.float64)
    if tail.size == 0:
        return True
    return bool(tail.max() + float(delta_h) <= float(promoted_rth_log_mass))


def score_canary(ref_scores, quant_scores, delta_h, epsilon_guard):
    """True iff every per-token score difference stays within the declared
    perturbation bound plus the numerical guard."""
    ref = np.asarray(ref_scores, dtype=np.float64)
    quant = np.asarray(quant_scores, dtype=np.float64)
    if ref.shape != quant.shape:
        raise ValueError("score canaries need matching token sets")
    if ref.size == 0:
        return True
    return bool(np.abs(ref - quant).max() <= float(delta_h) + float(epsilon_guard))


def exploration_spot_check(rng, query, cache, phase1, candidates, rate,
                           delta_h, epsilon_guard):
    """Score a random sample of non-promoted blocks at reference precision
    and compare against their quantized scores, as the canary does.

    The sample size is round(rate * num_blocks), capped by the candidate
    pool; selection is deterministic given the generator state.  Returns
    (verdicts, report) where verdicts maps block -> passed and the report
    accounts the Tier-2 reads like any other page-in.
    """
    candidates = sorted(int(b) for b in candidates)
    count = min(len(candidates), int(round(rate * cache.num_blocks)))
    report = PageInReport()
    verdicts = {}
    if count == 0:
        return verdicts, report
    chosen = rng.choice(len(candidates), size=count, replace=False)
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    for pos in sorted(int(c) for c in chosen):
        b = candidates[pos]
        ref = score_rows(cache.original_keys64(b), q, cache.head_dim)
        report.misses += 1
        report.bytes += cache.block_size * cache.head_dim * 2
        verdicts[b] = score_canary(ref, phase1.scores_for_block(b), delta_h,
                                   epsilon_guard)
    return verdicts, report


def rung3_per_head(query, cache):
    """Dense recomputation for one head; the exact oracle routine."""
    return dense_attention(query, cache)


def rung4_staging_bytes(token_counts, head_dim):
    """Transient staging cost of an all-head dense recomputation: the FP16
    key and value tensors for every cache, 2 * N * d * 2 bytes each."""
    return int(sum(2 * int(n) * int(head_dim) * 2 for n in token_counts))


def rung4_all_heads(queries, caches):
    """Dense recomputation for every head.

    ``queries`` holds one query per query head; ``caches`` maps each query
    head to its cache (repeat caches for grouped heads).  Returns the
    per-head dense outputs and the transient staging byte cost, charged once
    per distinct cache.
    """
    if len(queries) != len(caches):
        raise ValueError("need one cache reference per query head")
    outputs = [dense_attention(q, c) for q, c in zip(queries, caches)]
    distinct = {id(c): c for c in caches}.values()
    staging = rung4_staging_bytes([c.num_tokens for c in distinct],
                                  next(iter(distinct)).head_dim)
    return outputs, staging
