"""Wall-clock benchmark for the routing methods.

Times exactly the per-window routing call the network performs (routing
plus output activations) on pre-generated votes, single-threaded, float32.
Vote generation and output checksumming happen outside the timed windows,
and every timed repetition's output must match the untimed reference
bitwise, so a broken kernel can never post a time.

Absolute times are machine-dependent; the quantity of interest is the
ratio of each fast method's median to the Gaussian EM baseline's median at
the same shape.
"""

import hashlib
import statistics
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .errors import BenchError, ConfigError
from .network import _route_batch
from .routing import RoutingConfig, init_activation_params
from .rng import seed_stream

METHODS = ("frms", "frem", "em")


@dataclass
class BenchCase:
    n_inputs: int = 72
    n_outputs: int = 16
    method: str = "frem"
    iterations: int = 2
    batch: int = 64            # windows routed per call
    reps: int = 100
    warmup: int = 5
    routing: RoutingConfig = field(default_factory=RoutingConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected {METHODS}")
        if self.reps < 30:
            raise ConfigError("need at least 30 repetitions for reported stats")
        if self.warmup < 3:
            raise ConfigError("need at least 3 warmup calls")


@dataclass
class BenchStats:
    method: str
    mean_us: float
    std_us: float
    median_us: float
    min_us: float
    reps: int

    def __post_init__(self):
        if not (self.min_us <= self.median_us <= self.mean_us + 3 * self.std_us + 1e-9):
            raise BenchError("inconsistent sample statistics")


def _make_instance(case: BenchCase, seed: int):
    rng = seed_stream(seed, f"bench:{case.n_inputs}x{case.n_outputs}")
    votes = rng.normal(0.0, 0.02, size=(case.batch, case.n_inputs,
                                        case.n_outputs, 16)).astype(np.float32)
    acts = rng.uniform(0.3, 1.0, size=(case.batch, case.n_inputs)).astype(np.float32)
    return votes, acts


def _checksum(outputs):
    digest = hashlib.blake2b(digest_size=16)
    for out in outputs:
        digest.update(np.ascontiguousarray(ag.val(out)).tobytes())
    return digest.hexdigest()


def _timer_resolution_ns():
    best = None
    for _ in range(200):
        a = time.perf_counter_ns()
        b = time.perf_counter_ns()
        while b == a:
            b = time.perf_counter_ns()
        delta = b - a
        best = delta if best is None else min(best, delta)
    return best


def run_bench(case: BenchCase, seed: int = 0) -> BenchStats:
    """Time ``case.reps`` routing calls on one pre-generated vote batch."""
    if threading.active_count() > 1:
        raise BenchError("refusing to measure with background threads active")
    cfg = RoutingConfig(iterations=case.iterations, alpha=case.routing.alpha,
                        normalization=case.routing.normalization,
                        kernel=case.routing.kernel,
                        variance_floor=case.routing.variance_floor)
    votes, acts = _make_instance(case, seed)
    beta = init_activation_params(case.n_outputs, dtype=np.float32).beta

    def call():
        return _route_batch(votes, acts, case.method, cfg, beta, None)

    with threadpool_limits(limits=1):
        reference = _checksum(call())
        for _ in range(case.warmup):
            call()
        samples_ns = []
        for _ in range(case.reps):
            t0 = time.perf_counter_ns()
            out = call()
            t1 = time.perf_counter_ns()
            samples_ns.append(t1 - t0)
            if _checksum(out) != reference:
                raise BenchError("timed output diverged from the reference")
    resolution = _timer_resolution_ns()
    if statistics.median(samples_ns) < 100 * resolution:
        raise BenchError("case too small for the clock; increase the window batch")
    samples_us = [s / 1000.0 for s in samples_ns]
    return BenchStats(method=case.method,
                      mean_us=statistics.fmean(samples_us),
                      std_us=statistics.pstdev(samples_us),
                      median_us=statistics.median(samples_us),
                      min_us=min(samples_us),
                      reps=case.reps)


def compare_report(cases, seed: int = 0):
    """Run every case and tabulate each method against the EM baseline of
    the same shape.  Returns (text table, csv rows)."""
    results = []
    for case in cases:
        results.append((case, run_bench(case, seed)))
    shapes = {}
    for case, stats in results:
        shapes.setdefault((case.n_inputs, case.n_outputs, case.iterations,
                           case.batch), []).append((case, stats))
    if not any(len(group) >= 2 for group in shapes.values()):
        raise ConfigError("comparison needs at least two methods at one shape")
    rows = []
    lines = [f"{'method':<6} {'n_l':>5} {'n_out':>5} {'iters':>5} "
             f"{'mean_us':>12} {'std_us':>10} {'ratio_vs_em':>12}"]
    for shape, group in shapes.items():
        em_mean = next((s.mean_us for c, s in group if c.method == "em"), None)
        for case, stats in group:
            ratio = stats.mean_us / em_mean if em_mean else float("nan")
            rows.append({"method": stats.method, "n_l": case.n_inputs,
                         "n_out": case.n_outputs, "iters": case.iterations,
                         "mean_us": stats.mean_us, "std_us": stats.std_us,
                         "ratio_vs_em": ratio})
            lines.append(f"{stats.method:<6} {case.n_inputs:>5} {case.n_outputs:>5} "
                         f"{case.iterations:>5} {stats.mean_us:>12.1f} "
                         f"{stats.std_us:>10.1f} {ratio:>12.3f}")
    return "\n".join(lines), rows


def rows_to_csv(rows, path) -> None:
    with open(path, "w") as f:
        f.write("method,n_l,n_out,iters,mean_us,std_us,ratio_vs_em\n")
        for row in rows:
            f.write(f"{row['method']},{row['n_l']},{row['n_out']},{row['iters']},"
                    f"{row['mean_us']!r},{row['std_us']!r},{row['ratio_vs_em']!r}\n")
