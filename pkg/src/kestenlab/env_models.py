"""Distribution families for the driving pairs (M, Q) and moment checks.

An Environment bundles a matrix law for M, a vector law for Q, and the
flags that the rest of the toolkit keys on (independence of M and Q,
symmetry of Q, a candidate exponent for the moment conditions).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .rng import as_generator


class ConfigurationError(ValueError):
    """Invalid family parameters or an inconsistent environment."""


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def operator_norm(m: np.ndarray) -> np.ndarray:
    """Largest singular value of m, batched over leading axes."""
    m = np.asarray(m, dtype=float)
    if m.ndim == 2:
        return np.linalg.norm(m, ord=2)
    return np.linalg.norm(m, ord=2, axis=(-2, -1))


def random_rotations(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """Haar-uniform rotations on SO(dim), shape (count, dim, dim)."""
    if dim == 1:
        return np.ones((count, 1, 1))
    if dim == 2:
        theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
        c, s = np.cos(theta), np.sin(theta)
        out = np.empty((count, 2, 2))
        out[:, 0, 0] = c
        out[:, 0, 1] = -s
        out[:, 1, 0] = s
        out[:, 1, 1] = c
        return out
    g = rng.standard_normal((count, dim, dim))
    q, r = np.linalg.qr(g)
    # fix the QR gauge so q is Haar on O(dim), then push onto SO(dim)
    sign = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    sign[sign == 0] = 1.0
    q = q * sign[:, None, :]
    det = np.linalg.det(q)
    q[det < 0, :, -1] *= -1.0
    return q


def _check_probs(probs: Sequence[float], what: str) -> tuple[float, ...]:
    p = tuple(float(x) for x in probs)
    if any(x < 0 for x in p) or abs(sum(p) - 1.0) > 1e-12:
        raise ConfigurationError(f"{what}: probabilities must be nonnegative and sum to 1")
    return p


# ---------------------------------------------------------------------------
# matrix laws
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarTwoPoint:
    """M takes one of two nonzero scalar values (dimension 1)."""

    values: tuple[float, float] = (2.0, 0.5)
    probs: tuple[float, float] = (1.0 / 3.0, 2.0 / 3.0)

    def __post_init__(self):
        if len(self.values) != 2 or len(self.probs) != 2:
            raise ConfigurationError("scalar_two_point: need exactly two atoms")
        if any(v == 0.0 for v in self.values):
            raise ConfigurationError("scalar_two_point: atoms must be nonzero")
        object.__setattr__(self, "probs", _check_probs(self.probs, "scalar_two_point"))

    @property
    def dim(self) -> int:
        return 1

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        vals = rng.choice(np.asarray(self.values, dtype=float), size=count, p=self.probs)
        return vals.reshape(count, 1, 1)


@dataclass(frozen=True)
class Similarity:
    """M = c * O with O a uniform rotation and c a positive discrete scale.

    Every draw satisfies |vM| = c for all unit v, so the operator norm is
    exactly the scale factor.
    """

    dim: int
    scale_values: tuple[float, ...]
    scale_probs: tuple[float, ...]

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigurationError("similarity: dim must be >= 1")
        if len(self.scale_values) != len(self.scale_probs) or not self.scale_values:
            raise ConfigurationError("similarity: scale atoms and probs must match")
        if any(v <= 0 for v in self.scale_values):
            raise ConfigurationError("similarity: scales must be positive")
        object.__setattr__(self, "scale_values", tuple(float(v) for v in self.scale_values))
        object.__setattr__(self, "scale_probs", _check_probs(self.scale_probs, "similarity"))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        c = rng.choice(np.asarray(self.scale_values), size=count, p=self.scale_probs)
        rot = random_rotations(rng, count, self.dim)
        return c[:, None, None] * rot


@dataclass(frozen=True)
class GaussianMatrix:
    """i.i.d. N(0, scale^2) entries, resampled while |det| < min_abs_det."""

    dim: int
    scale: float = 1.0
    min_abs_det: float = 1e-6

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigurationError("gaussian matrix: scale must be positive")
        if self.dim < 1:
            raise ConfigurationError("gaussian matrix: dim must be >= 1")

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        out = self.scale * rng.standard_normal((count, self.dim, self.dim))
        for _ in range(100):
            bad = np.abs(np.linalg.det(out)) < self.min_abs_det
            n_bad = int(bad.sum())
            if n_bad == 0:
                return out
            out[bad] = self.scale * rng.standard_normal((n_bad, self.dim, self.dim))
        raise ConfigurationError("gaussian matrix: determinant rejection did not terminate")


@dataclass(frozen=True)
class DiagonalTimesRotation:
    """M = diag(exp(N(log_mean, log_sigma^2))) @ O with O a uniform rotation."""

    dim: int
    log_mean: float = 0.0
    log_sigma: float = 0.5

    def __post_init__(self):
        if self.log_sigma < 0:
            raise ConfigurationError("diag_rotation: log_sigma must be nonnegative")

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        diags = np.exp(self.log_mean + self.log_sigma * rng.standard_normal((count, self.dim)))
        rot = random_rotations(rng, count, self.dim)
        return diags[:, :, None] * rot


@dataclass(frozen=True)
class ConstantMatrix:
    """Deterministic M.  Invertibility is deliberately not enforced here:
    degenerate choices (zero, expanding multiples of the identity) are the
    standard probes for the simulation layer."""

    matrix: tuple

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if m.shape[0] != m.shape[1]:
            raise ConfigurationError("constant matrix must be square")
        object.__setattr__(self, "matrix", tuple(tuple(row) for row in m))

    @property
    def dim(self) -> int:
        return len(self.matrix)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        m = np.asarray(self.matrix, dtype=float)
        return np.broadcast_to(m, (count, *m.shape)).copy()


@dataclass(frozen=True)
class MatrixMixture:
    """Draws the component first, then a matrix from it."""

    components: tuple
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.components) != len(self.weights) or not self.components:
            raise ConfigurationError("mixture: components and weights must match")
        object.__setattr__(self, "weights", _check_probs(self.weights, "mixture"))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        idx = rng.choice(len(self.components), size=count, p=self.weights)
        dim = _law_dim(self.components[0])
        out = np.empty((count, dim, dim))
        for j, law in enumerate(self.components):
            take = idx == j
            n = int(take.sum())
            if n:
                out[take] = law.sample(rng, n)
        return out


@dataclass(frozen=True)
class TransposedMatrixLaw:
    """Law of M^T for any base matrix law."""

    base: object

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return np.swapaxes(self.base.sample(rng, count), -1, -2)


def _law_dim(law) -> int:
    if hasattr(law, "dim"):
        return int(law.dim)
    if isinstance(law, TransposedMatrixLaw):
        return _law_dim(law.base)
    raise ConfigurationError(f"cannot infer dimension of {law!r}")


# ---------------------------------------------------------------------------
# vector laws
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantVector:
    values: tuple

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "values", tuple(v))

    @property
    def dim(self) -> int:
        return len(self.values)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.values), (count, self.dim)).copy()


@dataclass(frozen=True)
class GaussianVector:
    dim: int
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigurationError("gaussian vector: scale must be positive")

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.scale * rng.standard_normal((count, self.dim))


@dataclass(frozen=True)
class TwoPointVector:
    first: tuple
    second: tuple
    prob_first: float = 0.5

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.first, dtype=float))
        b = np.atleast_1d(np.asarray(self.second, dtype=float))
        if a.shape != b.shape:
            raise ConfigurationError("two_point vector: atoms must share a dimension")
        if not 0.0 <= self.prob_first <= 1.0:
            raise ConfigurationError("two_point vector: prob_first outside [0, 1]")
        object.__setattr__(self, "first", tuple(a))
        object.__setattr__(self, "second", tuple(b))

    @property
    def dim(self) -> int:
        return len(self.first)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        pick = rng.random(count) < self.prob_first
        a = np.asarray(self.first)
        b = np.asarray(self.second)
        return np.where(pick[:, None], a, b)


# ---------------------------------------------------------------------------
# environment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Environment:
    """Joint description of the i.i.d. driving sequence (M_n, Q_n)."""

    dim: int
    matrix_law: object
    vector_law: object
    independent_mq: bool = True
    q_symmetric: bool = False
    kappa0_hint: float = 1.0

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigurationError("dim must be >= 1")
        if _law_dim(self.matrix_law) != self.dim:
            raise ConfigurationError("matrix law dimension does not match env dim")
        if self.vector_law.dim != self.dim:
            raise ConfigurationError("vector law dimension does not match env dim")
        if self.kappa0_hint <= 0:
            raise ConfigurationError("kappa0_hint must be positive")
        if not self.independent_mq:
            raise ConfigurationError(
                "built-in families sample M and Q independently; "
                "independent_mq=False would misdescribe the law")

    def transposed(self) -> "Environment":
        """Environment driving the transposed recursion (M^T, Q)."""
        return replace(self, matrix_law=TransposedMatrixLaw(self.matrix_law))


def sample_matrices(env: Environment, rng, count: int) -> np.ndarray:
    return env.matrix_law.sample(as_generator(rng), count)


def sample_q(env: Environment, rng, count: int) -> np.ndarray:
    """Draws of Q; with q_symmetric each raw draw gets an independent sign."""
    rng = as_generator(rng)
    q = env.vector_law.sample(rng, count)
    if env.q_symmetric:
        signs = np.where(rng.random(count) < 0.5, 1.0, -1.0)
        q = q * signs[:, None]
    return q


def sample_q_paired(env: Environment, rng, pairs: int) -> np.ndarray:
    """Each raw draw emitted with both signs; the sum over a batch is exactly 0."""
    if not env.q_symmetric:
        raise ConfigurationError("paired symmetrization requires q_symmetric=True")
    raw = env.vector_law.sample(as_generator(rng), pairs)
    out = np.empty((2 * pairs, env.dim))
    out[0::2] = raw
    out[1::2] = -raw
    return out


def sample_pairs(env: Environment, rng, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Batch of (M, Q) draws; M first, then Q, then symmetrization signs."""
    rng = as_generator(rng)
    m = env.matrix_law.sample(rng, count)
    q = sample_q(env, rng, count)
    return m, q


def sample_pair(env: Environment, rng) -> tuple[np.ndarray, np.ndarray]:
    """One draw of (M, Q)."""
    m, q = sample_pairs(env, rng, 1)
    return m[0], q[0]


# ---------------------------------------------------------------------------
# moment assumption checks
# ---------------------------------------------------------------------------

NOT_CHECKABLE = "not-checkable"


@dataclass
class AssumptionEntry:
    name: str
    verdict: str                      # "pass" | "fail" | "not-checkable"
    estimate: float | None = None
    std_error: float | None = None
    detail: dict | None = None


@dataclass
class AssumptionReport:
    entries: dict
    mc_n: int

    def verdict(self, name: str) -> str:
        return self.entries[name].verdict

    def all_checkable_pass(self) -> bool:
        return all(e.verdict == "pass" for e in self.entries.values()
                   if e.verdict != NOT_CHECKABLE)

    def summary(self) -> str:
        lines = []
        for name in sorted(self.entries):
            e = self.entries[name]
            est = "" if e.estimate is None else f" est={e.estimate:.6g}"
            lines.append(f"{name}: {e.verdict}{est}")
        return "\n".join(lines)


def _moment_diagnostic(x: np.ndarray) -> tuple[float, float, bool]:
    """Sample mean, its standard error, and a crude integrability verdict.

    The verdict demands all values finite and the top percentile of draws
    contributing at most half of the total mass; a heavier concentration
    signals a sample mean that is still driven by single extremes.
    """
    x = np.asarray(x, dtype=float)
    finite = bool(np.all(np.isfinite(x)))
    mean = float(np.mean(x)) if finite else math.inf
    se = float(np.std(x) / math.sqrt(len(x))) if finite else math.inf
    ok = finite
    total = float(np.sum(x)) if finite else math.inf
    if finite and total > 0:
        k = max(1, int(0.01 * len(x)))
        top = float(np.sort(x)[-k:].sum())
        ok = ok and top <= 0.5 * total
    return mean, se, ok


def check_assumptions(env: Environment, mc_n: int, rng,
                      direction_resolution: int = 64) -> AssumptionReport:
    """Monte-Carlo feasibility checks for the moment assumptions.

    Support/density conditions cannot be certified from draws alone, so
    those entries are always reported as not-checkable.  Inconclusive
    moment checks come back as "fail" with the estimate attached.
    """
    if mc_n < 1000:
        raise ConfigurationError("check_assumptions: need mc_n >= 1000")
    rng = as_generator(rng)
    m = sample_matrices(env, rng, mc_n)
    q = sample_q(env, rng, mc_n)
    m_norms = operator_norm(m)
    q_norms = np.linalg.norm(q, axis=1)
    entries: dict[str, AssumptionEntry] = {}

    # A1 / A2: log-moment finiteness of ||M|| and ||Q||
    for name, norms in (("A1", m_norms), ("A2", q_norms)):
        logplus = np.log(np.maximum(norms, 1.0))
        mean, se, ok = _moment_diagnostic(logplus)
        entries[name] = AssumptionEntry(name, "pass" if ok else "fail", mean, se)

    # A3: invertibility is a per-family construction property
    det = np.linalg.det(m)
    frac_singular = float(np.mean(np.abs(det) < 1e-12))
    entries["A3"] = AssumptionEntry("A3", "pass" if frac_singular == 0.0 else "fail",
                                    frac_singular, None,
                                    {"singular_fraction": frac_singular})

    # A4 / A4* / A5: projective support and density conditions
    for name in ("A4", "A4*", "A5"):
        entries[name] = AssumptionEntry(name, NOT_CHECKABLE)

    # A6: no almost-sure fixed point of x -> Mx + Q
    entries["A6"] = _check_a6(env, m, q)

    # A7: moment conditions at the candidate exponent
    entries["A7"] = _check_a7(env, m, q, m_norms, q_norms, direction_resolution)

    return AssumptionReport(entries=entries, mc_n=mc_n)


def _check_a6(env: Environment, m: np.ndarray, q: np.ndarray) -> AssumptionEntry:
    q_degenerate = bool(np.all(np.isclose(q, q[0], atol=1e-14)))
    if env.independent_mq and not q_degenerate:
        return AssumptionEntry("A6", "pass", 0.0, None, {"reason": "independent M, Q and Q non-degenerate"})
    # look for a common solution of M r + Q = r across the sampled pairs
    d = env.dim
    eye = np.eye(d)
    r_hat = None
    for k in range(min(len(m), 32)):
        a = eye - m[k]
        if abs(np.linalg.det(a)) > 1e-12:
            r_hat = np.linalg.solve(a, q[k])
            break
    if r_hat is None:
        return AssumptionEntry("A6", "pass", 0.0, None,
                               {"reason": "no candidate fixed point solvable"})
    resid = m @ r_hat + q - r_hat
    frac_fixed = float(np.mean(np.linalg.norm(resid, axis=1) <= 1e-10 * (1.0 + np.linalg.norm(r_hat))))
    verdict = "fail" if frac_fixed >= 1.0 else "pass"
    return AssumptionEntry("A6", verdict, frac_fixed, None,
                           {"candidate_fixed_point": r_hat.tolist()})


def _check_a7(env: Environment, m: np.ndarray, q: np.ndarray,
              m_norms: np.ndarray, q_norms: np.ndarray,
              direction_resolution: int) -> AssumptionEntry:
    from .spectral import build_grid  # local import; spectral does not import back

    k0 = env.kappa0_hint
    grid = build_grid(env.dim, direction_resolution)
    # inf over grid directions of |vM| per draw (row action)
    vm = np.einsum("gj,njk->ngk", grid.points, m)
    inf_norms = np.linalg.norm(vm, axis=2).min(axis=1)
    inf_pow = inf_norms ** k0
    inf_est = float(np.mean(inf_pow))
    inf_se = float(np.std(inf_pow) / math.sqrt(len(inf_pow)))

    with np.errstate(over="ignore"):
        m_moment = m_norms ** k0 * np.log(np.maximum(m_norms, 1.0))
        q_moment = q_norms ** k0
    _, _, m_ok = _moment_diagnostic(m_moment)
    q_mean, q_se, q_ok = _moment_diagnostic(q_moment)

    inf_ok = inf_est >= 1.0 - 2.0 * inf_se
    q_positive = q_mean > 0.0
    verdict = "pass" if (inf_ok and m_ok and q_ok and q_positive) else "fail"
    detail = {
        "inf_direction_moment": inf_est,
        "inf_direction_moment_se": inf_se,
        "m_kappa0_logplus_finite": m_ok,
        "q_kappa0_moment": q_mean,
        "q_kappa0_moment_se": q_se,
        "q_moment_positive": q_positive,
        "kappa0": k0,
    }
    return AssumptionEntry("A7", verdict, inf_est, inf_se, detail)
