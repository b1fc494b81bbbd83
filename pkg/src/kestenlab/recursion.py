"""Simulation of the matrix recursion, its stationary law, and growth rates.

Forward paths follow R_k = M_k R_{k-1} + Q_k from a given start.  The
stationary law is sampled through the truncated backward series
sum_n M_1...M_{n-1} Q_n, whose partial products contract at the rate of
the top Lyapunov exponent when that exponent is negative.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .batches import SampleBatch
from .env_models import ConfigurationError, Environment, sample_pairs
from .rng import as_generator, substream

_RENORM_EVERY = 50
_OVERFLOW_LIMIT = 1e300
_STATIONARY_CHUNK = 250_000


class TrajectoryOverflowError(RuntimeError):
    """A forward path left the floating range (expanding or bad parameters)."""


class NonContractionError(RuntimeError):
    """The adaptive backward series did not contract within the term cap."""


@dataclass(frozen=True)
class PathConfig:
    n_steps: int
    start_x: tuple
    replicas: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigurationError("n_steps must be >= 1")
        if self.replicas < 1:
            raise ConfigurationError("replicas must be >= 1")
        object.__setattr__(self, "start_x",
                           tuple(np.atleast_1d(np.asarray(self.start_x, dtype=float))))


@dataclass(frozen=True)
class SeriesConfig:
    """Backward-series truncation: either a fixed depth or a stop tolerance."""

    truncation: int | None = None
    tolerance: float | None = None
    seed: int = 0
    max_terms: int = 100_000

    def __post_init__(self):
        fixed = self.truncation is not None
        adaptive = self.tolerance is not None
        if fixed == adaptive:
            raise ConfigurationError("set exactly one of truncation / tolerance")
        if fixed and self.truncation < 1:
            raise ConfigurationError("truncation must be >= 1")
        if adaptive and self.tolerance <= 0:
            raise ConfigurationError("tolerance must be positive")


@dataclass
class ForwardPaths:
    """states[r, k] = R_k for replica r (k = 0 is the start); sums[r, k] = S_k."""

    states: np.ndarray
    sums: np.ndarray


@dataclass(frozen=True)
class LyapunovEstimate:
    beta: float
    std_error: float

    @property
    def contractive(self) -> bool:
        return self.beta < 0.0


def _check_finite(r: np.ndarray, step: int) -> None:
    mx = float(np.max(np.abs(r))) if r.size else 0.0
    if not np.isfinite(mx) or mx > _OVERFLOW_LIMIT:
        raise TrajectoryOverflowError(
            f"|R_n| left the floating range at step {step} (max {mx:.3g}); "
            "the chain looks non-contractive or the parameters are bad")


def iterate_forward(env: Environment, cfg: PathConfig) -> ForwardPaths:
    """All replicas of (R_k, S_k), k = 0..n_steps, from the configured seed."""
    rng = substream(cfg.seed)
    d = env.dim
    reps = cfg.replicas
    x = np.asarray(cfg.start_x, dtype=float)
    states = np.empty((reps, cfg.n_steps + 1, d))
    sums = np.empty((reps, cfg.n_steps + 1, d))
    r = np.broadcast_to(x, (reps, d)).copy()
    s = np.zeros((reps, d))
    states[:, 0] = r
    sums[:, 0] = s
    with np.errstate(over="ignore"):  # overflow is detected and raised below
        for k in range(1, cfg.n_steps + 1):
            m, q = sample_pairs(env, rng, reps)
            r = np.einsum("nij,nj->ni", m, r) + q
            s = s + r
            states[:, k] = r
            sums[:, k] = s
            if k % 64 == 0:
                _check_finite(r, k)
    _check_finite(r, cfg.n_steps)
    return ForwardPaths(states=states, sums=sums)


def birkhoff_sums(env: Environment, cfg: PathConfig) -> SampleBatch:
    """Final partial sums S_n per replica, without storing the paths."""
    rng = substream(cfg.seed)
    d = env.dim
    reps = cfg.replicas
    r = np.broadcast_to(np.asarray(cfg.start_x, dtype=float), (reps, d)).copy()
    s = np.zeros((reps, d))
    with np.errstate(over="ignore"):  # overflow is detected and raised below
        for k in range(1, cfg.n_steps + 1):
            m, q = sample_pairs(env, rng, reps)
            r = np.einsum("nij,nj->ni", m, r) + q
            s += r
            if k % 64 == 0:
                _check_finite(r, k)
    _check_finite(r, cfg.n_steps)
    return SampleBatch(data=s, kind="birkhoff", seed=cfg.seed,
                       info={"n_steps": cfg.n_steps, "start_x": list(cfg.start_x)})


def _stationary_chunk(env: Environment, count: int, cfg: SeriesConfig,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Backward-series draws for one chunk; returns (values, realized depths).

    Finished draws are compacted out of the working arrays, so the cost per
    step tracks the number of still-active series.
    """
    d = env.dim
    out = np.zeros((count, d))
    depths = np.zeros(count, dtype=np.int64)
    r = np.zeros((count, d))
    prod = np.broadcast_to(np.eye(d), (count, d, d)).copy()
    log_scale = np.zeros(count)
    idx = np.arange(count)
    adaptive = cfg.tolerance is not None
    log_tol = math.log(cfg.tolerance) if adaptive else -math.inf
    log_q99 = None
    n = 0
    while idx.size:
        n += 1
        if adaptive and n > cfg.max_terms:
            raise NonContractionError(
                f"adaptive series exceeded {cfg.max_terms} terms; "
                "the products are not contracting")
        m, q = sample_pairs(env, rng, idx.size)
        if log_q99 is None:
            q99 = float(np.quantile(np.linalg.norm(q, axis=1), 0.99))
            log_q99 = math.log(q99) if q99 > 0 else -math.inf
        with np.errstate(under="ignore"):
            r += np.exp(log_scale)[:, None] * np.einsum("nij,nj->ni", prod, q)
        prod = np.matmul(prod, m)
        retire = None
        if adaptive:
            with np.errstate(divide="ignore"):
                log_norm = np.log(np.linalg.norm(prod, axis=(1, 2)))
            retire = log_scale + log_norm + log_q99 < log_tol
        elif n >= cfg.truncation:
            retire = np.ones(idx.size, dtype=bool)
        if retire is not None and retire.any():
            done = idx[retire]
            out[done] = r[retire]
            depths[done] = n
            keep = ~retire
            idx, r, prod, log_scale = idx[keep], r[keep], prod[keep], log_scale[keep]
        if n % _RENORM_EVERY == 0 and idx.size:
            # pull the product norm into a log accumulator so strongly
            # contractive chains do not underflow the matrix entries
            norms = np.linalg.norm(prod, axis=(1, 2))
            safe = np.maximum(norms, 1e-290)
            prod /= safe[:, None, None]
            log_scale += np.log(safe)
    return out, depths


def sample_stationary(env: Environment, cfg: SeriesConfig, count: int,
                      threads: int = 1) -> SampleBatch:
    """count i.i.d. draws of the truncated backward series.

    Work is split into fixed-size chunks with per-chunk substreams, so the
    result is identical for any thread count.
    """
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    chunks = []
    start = 0
    idx = 0
    while start < count:
        size = min(_STATIONARY_CHUNK, count - start)
        chunks.append((idx, size))
        start += size
        idx += 1

    def run_chunk(args):
        chunk_idx, size = args
        return _stationary_chunk(env, size, cfg, substream(cfg.seed, chunk_idx))

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_chunk, chunks))
    else:
        results = [run_chunk(c) for c in chunks]
    data = np.concatenate([r for r, _ in results], axis=0)
    depths = np.concatenate([d for _, d in results])
    info = {
        "truncation": int(depths.max()),
        "mean_depth": float(depths.mean()),
        "tolerance": cfg.tolerance,
        "fixed_truncation": cfg.truncation,
    }
    return SampleBatch(data=data, kind="stationary", seed=cfg.seed, info=info)


def lyapunov(env: Environment, n_steps: int, replicas: int, rng) -> LyapunovEstimate:
    """Averaged per-replica n^{-1} log ||M_1 ... M_n|| with renormalized products.

    The running product is rescaled by its Frobenius norm every few steps
    (the factor is restored through a log accumulator, so the estimate is
    exact up to float rounding); the final operator norm then gives
    log ||product|| = accumulator + log ||renormalized product||.
    """
    if n_steps < 100:
        raise ConfigurationError("lyapunov: need n_steps >= 100")
    if replicas < 1:
        raise ConfigurationError("lyapunov: need replicas >= 1")
    rng = as_generator(rng)
    d = env.dim
    prod = np.broadcast_to(np.eye(d), (replicas, d, d)).copy()
    log_scale = np.zeros(replicas)
    for k in range(1, n_steps + 1):
        m = env.matrix_law.sample(rng, replicas)
        prod = np.matmul(prod, m)
        if k % _RENORM_EVERY == 0:
            norms = np.linalg.norm(prod, axis=(1, 2))
            safe = np.maximum(norms, 1e-290)
            prod /= safe[:, None, None]
            log_scale += np.log(safe)
    op = np.linalg.norm(prod, ord=2, axis=(1, 2))
    per_replica = (log_scale + np.log(op)) / n_steps
    beta = float(np.mean(per_replica))
    se = float(np.std(per_replica) / math.sqrt(replicas)) if replicas > 1 else 0.0
    return LyapunovEstimate(beta=beta, std_error=se)


def forward_burn_in(beta: float) -> int:
    """Default number of forward steps to discard before treating the chain
    as a stationary proxy: ten contraction times."""
    if beta >= 0:
        raise ConfigurationError("burn-in heuristic needs a negative Lyapunov exponent")
    return 10 * math.ceil(1.0 / abs(beta))
