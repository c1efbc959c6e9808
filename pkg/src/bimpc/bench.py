"""Batched forward-pass runtime: coupled layer vs decoupled baseline.

For each batch size the coupled two-agent layer (2N decision variables per
sample) is timed against the decoupled baseline deployed the way it runs in
practice: one single-agent solve per gripper (N variables each).  Both arms
consume byte-identical inputs, solve to the same tolerances, and include
per-sample assembly plus the batched solve in the timed region; engine
construction (shared across control ticks in deployment) is excluded.
Medians over the repetitions are reported, wall-clock outliers flagged.
"""

import csv
import hashlib
import time
from dataclasses import dataclass

import numpy as np

from .config import MpcConfig, MpcParams, init_params
from .mpc import MpcEngine, SingleAgentEngine, decoupled_weight_blocks
from .qp import QpStatus, SolverSettings


@dataclass
class BenchResult:
    batch_size: int
    multi_rt: float          # median seconds per batched forward
    single_rt: float
    increase_pct: float      # 100 * (multi - single) / single
    reps: int
    warmup: int
    outliers_multi: int      # repetitions slower than 3x the median
    outliers_single: int
    input_digest_multi: str
    input_digest_single: str
    failures: int


def _bench_params(cfg: MpcConfig, seed: int) -> MpcParams:
    """Representative trained-like parameters: moderate velocity
    sensitivities and coupling so the QPs are not trivially diagonal."""
    rng = np.random.default_rng(seed)
    p = init_params(cfg, seed)
    p.A_f = 0.6 * rng.standard_normal(cfg.M)
    p.C_f = 0.3 * rng.standard_normal(cfg.M)
    p.Qc = 0.2 * rng.standard_normal((cfg.M, cfg.M))
    p.alpha = 0.6
    return p


def _inputs(cfg: MpcConfig, B: int, rng):
    states1 = np.column_stack([rng.uniform(25, 60, B), rng.uniform(-3, 3, B)])
    states2 = np.column_stack([rng.uniform(25, 60, B), rng.uniform(-3, 3, B)])
    F1 = rng.standard_normal((B, cfg.M))
    F2 = rng.standard_normal((B, cfg.M))
    return states1, states2, F1, F2


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def run_bench(batch_sizes, cfg: MpcConfig | None = None, seed: int = 0,
              params: MpcParams | None = None, reps: int = 20,
              warmup: int = 3, settings: SolverSettings | None = None):
    """Returns a list of BenchResult, one per batch size."""
    cfg = cfg or MpcConfig()
    params = params or _bench_params(cfg, seed)
    settings = settings or SolverSettings()
    results = []
    for B in batch_sizes:
        if B < 1:
            raise ValueError("batch sizes must be >= 1")
        rng = np.random.default_rng((seed, B))
        states1, states2, F1, F2 = _inputs(cfg, B, rng)
        digest = _digest(states1, states2, F1, F2)

        multi = MpcEngine(params, cfg, settings)
        W1, W2 = decoupled_weight_blocks(params, cfg)
        single1 = SingleAgentEngine(W1, params.A_f, cfg, settings)
        single2 = SingleAgentEngine(W2, params.A_f, cfg, settings)

        failures = 0

        def run_multi():
            nonlocal failures
            _, fail = multi.forward_batch(states1, states2, F1, F2)
            failures += fail

        def run_single():
            nonlocal failures
            sols1 = single1.forward_batch(states1, F1)
            sols2 = single2.forward_batch(states2, F2)
            failures += sum(s.status is not QpStatus.Solved
                            for s in sols1 + sols2)

        times_m, times_s = [], []
        for arm, sink in ((run_multi, times_m), (run_single, times_s)):
            for r in range(warmup + reps):
                t0 = time.perf_counter()
                arm()
                elapsed = time.perf_counter() - t0
                if r >= warmup:
                    sink.append(elapsed)
        med_m = float(np.median(times_m))
        med_s = float(np.median(times_s))
        results.append(BenchResult(
            batch_size=int(B), multi_rt=med_m, single_rt=med_s,
            increase_pct=100.0 * (med_m - med_s) / med_s,
            reps=reps, warmup=warmup,
            outliers_multi=int(np.sum(np.array(times_m) > 3 * med_m)),
            outliers_single=int(np.sum(np.array(times_s) > 3 * med_s)),
            input_digest_multi=digest, input_digest_single=digest,
            failures=failures))
    return results


def export_bench_csv(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch_size", "multi_rt_s", "single_rt_s", "increase_pct"])
        for r in results:
            w.writerow([r.batch_size, f"{r.multi_rt:.6f}",
                        f"{r.single_rt:.6f}", f"{r.increase_pct:.2f}"])


DEFAULT_GRID = (1, 2, 4, 8, 16, 32, 64, 128)
