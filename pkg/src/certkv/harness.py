"""Workload generation, decode-step orchestration and telemetry aggregation.

A workload is a set of per-KV-head caches plus a query stream.  Each decode
step runs every query head through the certified pipeline against its group's
cache (grouped-query mapping), then appends one fresh token per cache, so the
trailing partial block and block formation are exercised continuously.
Prefill is modelled as bulk append: no certified scoring happens while the
initial context loads.

Randomness comes from counter-based Philox streams spawned from the workload
seed (one child per purpose), so runs are bit-reproducible and the
exploration subsets replay exactly; telemetry records the generator name.

Steps are sequential; heads within a step are independent.  Telemetry
aggregation is a commutative merge over head-step records.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import certifier
from .attention import adaptive_topk, dense_attention, phase1_score, phase2_attend
from .cache import PageInReport, ScratchCache, TieredCache, promote_blocks
from .certifier import (RETURNED_DENSE_ALL_HEADS, RETURNED_DENSE_PER_HEAD,
                        RETURNED_QUANTIZED, RungFlags, assemble_certificate,
                        compute_delta)
from .fallback import (CAUSE_BOUNDARY, CAUSE_CANARY, CAUSE_COVERAGE,
                       CAUSE_RANKING, CAUSE_VALUE_TOL, FallbackEvent,
                       PolicyConfig, boundary_check, exploration_spot_check,
                       ranking_consistency, rung1_expand,
                       rung2_value_promotions, rung4_staging_bytes,
                       score_canary)

RNG_ALGORITHM = "philox4x64"

WORKLOAD_KINDS = ("gaussian", "sink", "needle", "near_tie")


@dataclass(frozen=True)
class WorkloadConfig:
    kind: str = "gaussian"
    n_tokens: int = 1024
    head_dim: int = 64
    block_size: int = 16
    group_size: int = 16
    query_heads: int = 1
    kv_heads: int = 1
    steps: int = 8
    seed: int = 0
    ingest_binary16: bool = False

    def __post_init__(self):
        if self.kind not in WORKLOAD_KINDS:
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if self.n_tokens < 1:
            raise ValueError("n_tokens must be at least 1")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.query_heads % self.kv_heads != 0:
            raise ValueError("kv_heads must divide query_heads")
        if self.head_dim % self.group_size != 0:
            raise ValueError("group_size must divide head_dim")

    @property
    def group_factor(self):
        return self.query_heads // self.kv_heads

    def kv_index(self, query_head):
        return query_head // self.group_factor

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown workload fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Workload:
    config: WorkloadConfig
    caches: list
    queries: np.ndarray  # float64 (steps, query_heads, d)
    new_keys: np.ndarray  # float32 (steps, kv_heads, d)
    new_values: np.ndarray


def _rng(seed, purpose):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, purpose))))


def generate_workload(config):
    """Deterministically build caches and a query stream from the seed.

    gaussian: i.i.d. standard-normal keys, values and queries.
    sink: block 0 planted with a large logit margin so the oracle puts most
      attention mass on it.
    needle: a single token's key aligned with the per-head query direction.
    near_tie: blocks 0 and 1 differ by a tiny shift along the query
      direction, so their true log-masses sit closer than the quantization
      perturbation bound and rank flips become possible.
    """
    cfg = config
    d = cfg.head_dim
    rng = _rng(cfg.seed, 0)
    total = cfg.n_tokens + cfg.steps

    keys = rng.standard_normal((cfg.kv_heads, total, d))
    values = rng.standard_normal((cfg.kv_heads, total, d))
    queries = rng.standard_normal((cfg.steps, cfg.query_heads, d))

    kappa = 3.0
    directions = np.empty((cfg.kv_heads, d))
    for kv in range(cfg.kv_heads):
        w = rng.standard_normal(d)
        directions[kv] = w / np.linalg.norm(w)

    if cfg.kind != "gaussian":
        for h in range(cfg.query_heads):
            queries[:, h, :] += kappa * directions[cfg.kv_index(h)]

    if cfg.kind == "sink":
        planted = 2.0 * np.sqrt(d) / kappa
        span = min(cfg.block_size, cfg.n_tokens)
        for kv in range(cfg.kv_heads):
            keys[kv, :span] = planted * directions[kv] + 0.1 * keys[kv, :span]
    elif cfg.kind == "needle":
        planted = 2.5 * np.sqrt(d) / kappa
        pos = cfg.n_tokens // 2
        for kv in range(cfg.kv_heads):
            keys[kv, pos] = planted * directions[kv]
    elif cfg.kind == "near_tie":
        if cfg.n_tokens < 2 * cfg.block_size:
            raise ValueError("near_tie needs at least two full blocks")
        planted = 2.0 * np.sqrt(d) / kappa
        b = cfg.block_size
        for kv in range(cfg.kv_heads):
            base = planted * directions[kv] + 0.5 * keys[kv, :b]
            keys[kv, :b] = base
            # a twin block: elementwise jitter keeps the true log-mass gap
            # tiny but decorrelates the two blocks' rounding errors (a
            # uniform shift would be absorbed by the per-channel fit)
            keys[kv, b:2 * b] = base + 1e-4 * rng.standard_normal((b, d))

    caches = []
    for kv in range(cfg.kv_heads):
        cache = TieredCache(cfg.block_size, d, cfg.group_size,
                            ingest_binary16=cfg.ingest_binary16)
        cache.append_tokens(keys[kv, :cfg.n_tokens], values[kv, :cfg.n_tokens])
        caches.append(cache)

    return Workload(
        config=cfg,
        caches=caches,
        queries=queries,
        new_keys=np.swapaxes(keys[:, cfg.n_tokens:], 0, 1).astype(np.float32),
        new_values=np.swapaxes(values[:, cfg.n_tokens:], 0, 1).astype(np.float32),
    )


@dataclass
class HeadStepResult:
    """Everything one head produced in one decode step."""

    output: np.ndarray
    certificate: certifier.Certificate
    events: list
    page_reports: dict
    decision: object
    value_promotions: frozenset
    attend: object
    delta_h: float
    rung4_requested: bool = False


def _rth_log_mass(log_masses, r):
    ordered = sorted(log_masses.items(), key=lambda kv: (-kv[1], kv[0]))
    return ordered[r - 1][1]


def run_decode_step(query, cache, policy, key_scratch=None, value_scratch=None,
                    rng=None, head=0, step=0):
    """Run one head through the full pipeline in the fixed rung order:
    selection, coverage expansion, value promotion, page-in, fused attend,
    ranking/boundary checks, score canary and exploration, then escalation.

    Returns a :class:`HeadStepResult`; the output is the quantized fast-path
    result unless a dense rung fired.  A missing Tier-2 original surfaces as
    a hard error from the paging or fallback path.
    """
    phase1 = phase1_score(query, cache)
    _, delta_h = compute_delta(query, cache)
    events = []

    decision = adaptive_topk(phase1, policy.tau_cov, policy.k_min, policy.k_max)
    rung1_fired = False
    if policy.rung1_enabled:
        expanded = rung1_expand(decision, phase1)
        if expanded.k_star != decision.k_star:
            rung1_fired = True
            events.append(FallbackEvent(1, head, step, CAUSE_COVERAGE))
        decision = expanded

    value_promotions = frozenset()
    if policy.rung2_enabled and cache.num_blocks:
        value_promotions = rung2_value_promotions(
            decision.normalized_masses, cache.etas(), policy)
        if value_promotions:
            events.append(FallbackEvent(2, head, step, CAUSE_VALUE_TOL))

    page_reports = {}
    key_payloads = value_payloads = None
    if key_scratch is not None:
        report = promote_blocks(key_scratch, cache, decision.promoted, "keys")
        page_reports["keys"] = report
        key_payloads = report.payloads
    if value_scratch is not None:
        report = promote_blocks(value_scratch, cache, value_promotions, "values")
        page_reports["values"] = report
        value_payloads = report.payloads

    attend = phase2_attend(query, cache, decision, value_promotions,
                           key_payloads=key_payloads,
                           value_payloads=value_payloads)

    rung3 = False
    promoted = decision.promoted
    if policy.ranking_checks_enabled and promoted:
        if len(promoted) < policy.ranking_depth:
            # cannot issue the ranking certificate at this depth
            rung3 = True
            events.append(FallbackEvent(3, head, step, CAUSE_RANKING))
        else:
            quant_lm = {b: float(phase1.log_mass[b]) for b in promoted}
            if not ranking_consistency(attend.promoted_log_masses, quant_lm,
                                       policy.ranking_depth):
                rung3 = True
                events.append(FallbackEvent(3, head, step, CAUSE_RANKING))
            tail = decision.tail
            if not boundary_check(
                    phase1.log_mass[tail], delta_h,
                    _rth_log_mass(attend.promoted_log_masses,
                                  policy.ranking_depth)):
                rung3 = True
                events.append(FallbackEvent(3, head, step, CAUSE_BOUNDARY))

    rung4 = False
    if policy.canary_enabled and promoted:
        slices = [slice(b * cache.block_size, (b + 1) * cache.block_size)
                  for b in sorted(promoted)]
        ref = np.concatenate([attend.token_scores[s] for s in slices])
        quant = np.concatenate([phase1.token_scores[s] for s in slices])
        if not score_canary(ref, quant, delta_h, policy.epsilon_guard):
            rung4 = True
            events.append(FallbackEvent(4, head, step, CAUSE_CANARY))

    if policy.exploration_rate > 0 and rng is not None and cache.num_blocks:
        verdicts, report = exploration_spot_check(
            rng, query, cache, phase1, decision.tail, policy.exploration_rate,
            delta_h, policy.epsilon_guard)
        page_reports["exploration"] = report
        if not all(verdicts.values()):
            rung4 = True
            events.append(FallbackEvent(4, head, step, CAUSE_CANARY))

    flags = RungFlags(rung1=rung1_fired, rung2=bool(value_promotions),
                      rung3=rung3, rung4=rung4)
    if rung4:
        returned_kind = RETURNED_DENSE_ALL_HEADS
        output = dense_attention(query, cache)
    elif rung3:
        returned_kind = RETURNED_DENSE_PER_HEAD
        output = dense_attention(query, cache)
    else:
        returned_kind = RETURNED_QUANTIZED
        output = attend.output.astype(np.float64)

    certificate = assemble_certificate(
        head=head, step=step, delta_h=delta_h,
        est_tail_mass=decision.est_tail_mass, v_max=cache.v_max,
        k_star=decision.k_star, block_masses=attend.block_masses,
        etas=cache.etas(), value_promotions=value_promotions,
        rung_flags=flags, returned_kind=returned_kind)

    return HeadStepResult(
        output=output,
        certificate=certificate,
        events=events,
        page_reports=page_reports,
        decision=decision,
        value_promotions=value_promotions,
        attend=attend,
        delta_h=delta_h,
        rung4_requested=rung4,
    )


def gqa_union(n_tokens, block_size, k_max, query_heads, rung1_active=True):
    """Expected per-cache reference-key working set when every query head
    picks its own promoted blocks: ceil(N/B) * (1 - (1 - k/NB)^H) with
    k = min(2*k_max, NB) under coverage expansion.

    Returns (union_blocks, fraction_of_blocks).
    """
    if min(n_tokens, block_size, k_max, query_heads) <= 0:
        raise ValueError("all union parameters must be positive")
    nb = -(-int(n_tokens) // int(block_size))
    k_eff = min((2 if rung1_active else 1) * int(k_max), nb)
    fraction = 1.0 - (1.0 - k_eff / nb) ** int(query_heads)
    return nb * fraction, fraction


@dataclass
class RunResult:
    header: dict
    step_records: list
    summary: dict


def _scratch_snapshot(scratches):
    return [(s.hits, s.misses, s.bytes_paged_in) for s in scratches]


def _scratch_delta(scratches, before):
    hits = sum(s.hits for s in scratches) - sum(b[0] for b in before)
    misses = sum(s.misses for s in scratches) - sum(b[1] for b in before)
    paged = sum(s.bytes_paged_in for s in scratches) - sum(b[2] for b in before)
    total = hits + misses
    return {"hits": hits, "misses": misses,
            "hit_rate": hits / total if total else 0.0,
            "bytes_paged_in": paged}


def run_workload(workload, policy, key_capacity=2048, value_capacity=2048,
                 layers=1):
    """Drive a workload through decode: per step, run every query head,
    resolve a step-wide dense recomputation if any head demanded one, emit a
    telemetry record, then append that step's new token to each cache."""
    cfg = workload.config
    caches = workload.caches
    key_scratches = [ScratchCache(key_capacity) for _ in caches]
    value_scratches = [ScratchCache(value_capacity) for _ in caches]
    explore_rng = _rng(cfg.seed, 1)

    step_records = []
    for step in range(cfg.steps):
        key_before = _scratch_snapshot(key_scratches)
        value_before = _scratch_snapshot(value_scratches)
        results = []
        for h in range(cfg.query_heads):
            kv = cfg.kv_index(h)
            results.append(run_decode_step(
                workload.queries[step, h], caches[kv], policy,
                key_scratch=key_scratches[kv], value_scratch=value_scratches[kv],
                rng=explore_rng, head=h, step=step))

        staging_bytes = 0
        if any(r.rung4_requested for r in results):
            # a canary failure anywhere invalidates the whole step: every
            # head returns the dense output
            staging_bytes = rung4_staging_bytes(
                [c.num_tokens for c in caches], cfg.head_dim)
            for h, r in enumerate(results):
                kv = cfg.kv_index(h)
                r.output = dense_attention(workload.queries[step, h], caches[kv])
                r.certificate = dataclasses.replace(
                    r.certificate, returned_kind=RETURNED_DENSE_ALL_HEADS)

        record = _step_record(step, results, cfg, caches,
                              _scratch_delta(key_scratches, key_before),
                              _scratch_delta(value_scratches, value_before),
                              staging_bytes)
        step_records.append(record)

        for kv, cache in enumerate(caches):
            cache.append_token(workload.new_keys[step, kv],
                               workload.new_values[step, kv])

    header = {
        "config": cfg.to_dict(),
        "policy": policy.to_dict(),
        "seed": cfg.seed,
        "rng": RNG_ALGORITHM,
        "scratch": {"key_capacity": key_capacity,
                    "value_capacity": value_capacity},
        "layers": layers,
    }
    summary = aggregate_telemetry(step_records, cfg, layers=layers)
    return RunResult(header=header, step_records=step_records, summary=summary)


def _step_record(step, results, cfg, caches, key_scratch, value_scratch,
                 staging_bytes):
    certs = [r.certificate for r in results]
    events = [e for r in results for e in r.events]
    rung_counts = {f"rung{i}": 0 for i in (1, 2, 3, 4)}
    cause_counts = {}
    for e in events:
        rung_counts[f"rung{e.rung}"] += 1
        cause_counts[e.cause] = cause_counts.get(e.cause, 0) + 1

    union_fractions = []
    per_cache_union = {kv: set() for kv in range(cfg.kv_heads)}
    for h, r in enumerate(results):
        per_cache_union[cfg.kv_index(h)].update(r.decision.promoted)
    for kv, blocks in per_cache_union.items():
        nb = caches[kv].num_blocks
        if nb:
            union_fractions.append(len(blocks) / nb)

    bytes_paged = sum(rep.bytes for r in results
                      for rep in r.page_reports.values())

    def _mean(xs):
        return float(np.mean(xs)) if xs else 0.0

    def _max(xs):
        return float(np.max(xs)) if xs else 0.0

    return {
        "step": step,
        "e_key_step_mean": _mean([c.e_key_impl for c in certs]),
        "e_key_step_max": _max([c.e_key_impl for c in certs]),
        "e_key_step_mean_returned": _mean([c.returned_e_key for c in certs]),
        "e_key_step_max_returned": _max([c.returned_e_key for c in certs]),
        "e_val_step_mean": _mean([c.e_val for c in certs]),
        "e_val_step_max": _max([c.e_val for c in certs]),
        "e_val_step_mean_returned": _mean([c.returned_e_val for c in certs]),
        "e_val_step_max_returned": _max([c.returned_e_val for c in certs]),
        "k_star_mean": _mean([c.k_star for c in certs]),
        "est_tail_mass_mean": _mean([c.est_tail_mass for c in certs]),
        "delta_h_max": _max([c.delta_h for c in certs]),
        "rung_counts": rung_counts,
        "cause_counts": cause_counts,
        "events": [e.to_dict() for e in events],
        "certificates": [c.to_dict() for c in certs],
        "key_scratch": key_scratch,
        "value_scratch": value_scratch,
        "bytes_paged_in": bytes_paged,
        "rung4_staging_bytes": staging_bytes,
        "union_fraction_mean": _mean(union_fractions),
    }


def aggregate_telemetry(step_records, config, layers=1):
    """Collapse per-step records into a run summary.

    Head-step denominators are query_heads * steps (* layers when a
    multi-layer denominator is requested); step-level mechanisms use the
    plain step count.
    """
    steps = len(step_records)
    head_steps = steps * config.query_heads * layers
    rung_totals = {f"rung{i}": 0 for i in (1, 2, 3, 4)}
    cause_totals = {}
    for rec in step_records:
        for k, v in rec["rung_counts"].items():
            rung_totals[k] += v
        for k, v in rec["cause_counts"].items():
            cause_totals[k] = cause_totals.get(k, 0) + v

    all_certs = [c for rec in step_records for c in rec["certificates"]]

    def _stats(key):
        vals = [c[key] for c in all_certs]
        return {"mean": float(np.mean(vals)) if vals else 0.0,
                "max": float(np.max(vals)) if vals else 0.0}

    dense_head_steps = sum(
        1 for c in all_certs if c["returned_kind"] != RETURNED_QUANTIZED)

    return {
        "steps": steps,
        "head_steps": head_steps,
        "layers": layers,
        "rung_counts": rung_totals,
        "cause_counts": cause_totals,
        "rates": {
            "rung3_per_head_step": rung_totals["rung3"] / head_steps if head_steps else 0.0,
            "rung4_per_step": rung_totals["rung4"] / steps if steps else 0.0,
            "dense_fraction": dense_head_steps / head_steps if head_steps else 0.0,
        },
        "e_key_candidate": _stats("e_key_impl"),
        "e_key_tight_candidate": _stats("e_key_tight"),
        "e_key_returned": _stats("returned_e_key"),
        "e_val": _stats("e_val"),
        "e_val_returned": _stats("returned_e_val"),
        "k_star_mean": float(np.mean([c["k_star"] for c in all_certs])) if all_certs else 0.0,
        "est_tail_mass_mean": float(np.mean([c["est_tail_mass"] for c in all_certs])) if all_certs else 0.0,
        "bytes_paged_in_total": sum(r["bytes_paged_in"] for r in step_records),
        "rung4_staging_bytes_total": sum(r["rung4_staging_bytes"] for r in step_records),
        "union_fraction_mean": float(np.mean(
            [r["union_fraction_mean"] for r in step_records])) if step_records else 0.0,
    }
