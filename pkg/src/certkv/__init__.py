"""certkv: runtime-certified bounded-error quantized attention over a tiered
block KV cache.

The compressed tier holds per-channel INT8 keys and per-group INT4 values
with write-time error annotations; the reference tier retains the float32
originals.  Each decode step scores blocks on the quantized data, promotes
the high-mass blocks to reference precision, attends with mask-gated key
sources, and emits a per-head certificate bounding the output error.  When
runtime monitors detect that a bound cannot be certified, a four-rung
fallback ladder escalates up to an exact dense recomputation.
"""

__version__ = "0.1.0"

from . import _kernels
from .attention import (AttendResult, BlockScores, SelectionDecision,
                        adaptive_topk, dense_attention, phase1_score,
                        phase2_attend, ref_attention, scaled_query_score)
from .cache import (PageInReport, ScratchCache, StorageReport, TieredCache,
                    Tier2UnavailableError, PagingError, promote_blocks,
                    storage_report, storage_table)
from .certifier import (Certificate, RungFlags, assemble_certificate,
                        brute_force_tv, compute_delta, e_key_bound,
                        e_val_exact, mass_upper_bound, tail_mass_bound,
                        tv_bound, vertex_tv_pair)
from .fallback import (FallbackEvent, PolicyConfig, boundary_check,
                       exploration_spot_check, ranking_consistency,
                       rung1_expand, rung2_value_promotions, rung3_per_head,
                       rung4_all_heads, score_canary)
from .harness import (RunResult, Workload, WorkloadConfig, aggregate_telemetry,
                      generate_workload, gqa_union, run_decode_step,
                      run_workload)
from .quantizer import (BlockAnnotations, KeyBlockQuant, ValueBlockQuant,
                        dequantize_key_block, dequantize_value_block,
                        quantize_key_block, quantize_value_block)
