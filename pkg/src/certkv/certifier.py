"""Runtime error bounds, per-head-step certificates and brute-force oracles.

Every bound here is evaluated in float64.  The bound formulas themselves are
exact (no fudge terms), so algebraic identities between them hold to the ulp;
verification code that compares a bound against a 64-bit oracle recomputation
adds ``SOUNDNESS_SLACK`` of absolute headroom to absorb the oracle's own
rounding, which is conservative-safe because the underlying inequalities are
strict with far larger margins on sampled data.
"""

import math
from dataclasses import dataclass, field

import numpy as np

# absolute headroom for oracle-vs-bound comparisons (not part of any bound)
SOUNDNESS_SLACK = 1e-12

RETURNED_QUANTIZED = "quantized"
RETURNED_DENSE_PER_HEAD = "dense_per_head"
RETURNED_DENSE_ALL_HEADS = "dense_all_heads"


@dataclass(frozen=True)
class RungFlags:
    rung1: bool = False
    rung2: bool = False
    rung3: bool = False
    rung4: bool = False

    def to_dict(self):
        return {"rung1": self.rung1, "rung2": self.rung2,
                "rung3": self.rung3, "rung4": self.rung4}


@dataclass(frozen=True)
class Certificate:
    """Per-head per-step record of the computed bounds and the output kind.

    ``e_key_tight``/``e_key_impl`` are the candidate key-distortion bounds in
    the two exponent modes; ``e_val`` is the achieved value error after
    promotions.  ``returned_kind`` tells whether the emitted output was the
    quantized fast path or a dense fallback; dense outputs carry zero
    quantization error, reflected by ``returned_e_key``/``returned_e_val``.
    """

    head: int
    step: int
    delta_h: float
    e_key_tight: float
    e_key_impl: float
    e_val: float
    est_tail_mass: float
    v_max: float
    k_star: int
    returned_kind: str
    rung_flags: RungFlags = field(default_factory=RungFlags)

    @property
    def is_dense(self):
        return self.returned_kind != RETURNED_QUANTIZED

    @property
    def returned_e_key(self):
        return 0.0 if self.is_dense else self.e_key_impl

    @property
    def returned_e_val(self):
        return 0.0 if self.is_dense else self.e_val

    def to_dict(self):
        return {
            "head": self.head,
            "step": self.step,
            "delta_h": self.delta_h,
            "e_key_tight": self.e_key_tight,
            "e_key_impl": self.e_key_impl,
            "e_val": self.e_val,
            "est_tail_mass": self.est_tail_mass,
            "v_max": self.v_max,
            "k_star": self.k_star,
            "returned_kind": self.returned_kind,
            "returned_e_key": self.returned_e_key,
            "returned_e_val": self.returned_e_val,
            "rung_flags": self.rung_flags.to_dict(),
        }


def compute_delta(query, cache, scored_blocks=None):
    """Per-block score-perturbation bounds and their head-level max.

    For block b the bound is sum_c |q_c| * scale_c / (2 sqrt(d)); the head
    value is the max over all scored full blocks (the partial block carries
    no quantization and is excluded).  Returns (per_block, delta_h).
    """
    q = np.abs(np.asarray(query, dtype=np.float64).reshape(-1))
    if scored_blocks is None:
        scored_blocks = range(cache.num_blocks)
    scored_blocks = list(scored_blocks)
    denom = 2.0 * np.sqrt(cache.head_dim)
    per_block = np.asarray(
        [float(q @ cache.blocks[b].keys.scales) / denom for b in scored_blocks])
    delta_h = float(per_block.max()) if per_block.size else 0.0
    return per_block, delta_h


def delta_cauchy_schwarz(query, scales):
    """The looser norm-product form of the same bound, for cross-checks."""
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    s = np.asarray(scales, dtype=np.float64).reshape(-1)
    return float(np.linalg.norm(q) * np.linalg.norm(s) / (2.0 * np.sqrt(q.shape[0])))


def tv_bound(delta):
    """Total-variation bound tanh(delta) for logit perturbations up to delta."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    return math.tanh(delta)


def mass_upper_bound(block_sum, block_max, global_max, delta, exponent_mode):
    """Upper bound on a block's true unnormalised mass from quantized stats:
    S_b * exp(m_b - m_global + e*delta) with e in {2, 3}."""
    e = _exponent(exponent_mode)
    return float(block_sum) * math.exp(float(block_max) - float(global_max)
                                       + e * float(delta))


def tail_mass_bound(est_tail_mass, delta, exponent_mode):
    """True-tail-mass bound min(1, exp(e*delta) * estimated)."""
    e = _exponent(exponent_mode)
    return min(1.0, math.exp(e * float(delta)) * float(est_tail_mass))


def e_key_bound(v_max, delta, est_tail_mass, exponent_mode):
    """Key-distortion output bound 2 * v_max * e^{e*delta} * tail * (e^{2*delta} - 1).

    The trailing factor is always the two-delta one; only the tail-mass
    inflation exponent switches between the tight and implementation modes.
    """
    e = _exponent(exponent_mode)
    delta = float(delta)
    return (2.0 * float(v_max) * math.exp(e * delta) * float(est_tail_mass)
            * (math.exp(2.0 * delta) - 1.0))


def _exponent(exponent_mode):
    if exponent_mode not in (2, 3):
        raise ValueError(f"exponent mode must be 2 or 3, got {exponent_mode}")
    return float(exponent_mode)


def e_val_exact(block_masses, etas, value_promotions=()):
    """Achieved value error sum_b rho_b * eta_b over non-promoted blocks."""
    masses = np.asarray(block_masses, dtype=np.float64)
    etas = np.asarray(etas, dtype=np.float64)
    keep = np.ones(masses.shape[0], dtype=bool)
    for b in value_promotions:
        keep[int(b)] = False
    return float(masses[keep] @ etas[keep])


def brute_force_tv(a, b):
    """Exact total variation (half L1) between two probability vectors."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    for name, vec in (("first", a), ("second", b)):
        if np.any(vec < 0) or abs(vec.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} argument is not a probability vector")
    return 0.5 * float(np.abs(a - b).sum())


def vertex_tv_pair(delta):
    """Two-outcome distribution pair at the ratio-polytope vertex.

    Probabilities (p, 1-p) with p = 1 / (e^{2 delta} + 1) and the paired
    distribution scaled by e^{+-2 delta}; its total variation equals
    tanh(delta) exactly, witnessing tightness of :func:`tv_bound`.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    up = math.exp(2.0 * delta)
    p = 1.0 / (up + 1.0)
    a = np.asarray([p, 1.0 - p])
    b = np.asarray([p * up, (1.0 - p) / up])
    return a, b


def assemble_certificate(head, step, delta_h, est_tail_mass, v_max, k_star,
                         block_masses, etas, value_promotions, rung_flags,
                         returned_kind=RETURNED_QUANTIZED):
    """Bundle one head-step's candidate bounds into a certificate.

    Candidate bounds are always recorded; a dense ``returned_kind`` marks that
    the emitted output bypassed them entirely (the returned quantization
    error is zero by construction).
    """
    return Certificate(
        head=int(head),
        step=int(step),
        delta_h=float(delta_h),
        e_key_tight=e_key_bound(v_max, delta_h, est_tail_mass, 2),
        e_key_impl=e_key_bound(v_max, delta_h, est_tail_mass, 3),
        e_val=e_val_exact(block_masses, etas, value_promotions),
        est_tail_mass=float(est_tail_mass),
        v_max=float(v_max),
        k_star=int(k_star),
        returned_kind=returned_kind,
        rung_flags=rung_flags,
    )
