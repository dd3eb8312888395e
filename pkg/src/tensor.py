"""
Three-way array identification of a discrete latent variable.

Within a treatment level, W, Z and Y are mutually independent given the
latent U, so f(w, z, y | a) is a non-negative rank-|U| array. Two
recovery routes are offered:

* eigen: simultaneous diagonalization of the outcome slices, for square
  invertible proxies (|W| = |Z| = |U|);
* cp: alternating least squares on the CP decomposition, for any
  cardinalities satisfying Kruskal's k-rank condition.

Latent state order is arbitrary per level; estimates are aligned across
levels through P_{W|U}, which does not depend on the treatment.
"""

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize

from bridge import numerical_rank
from config import (
    ALS_MAX_ITERATIONS,
    ALS_RESTARTS,
    ALS_TOLERANCE,
    DEFAULT_TOLERANCES,
    EXHAUSTIVE_ALIGNMENT_MAX,
    SLICE_RETRIES,
    Tolerances,
)
from errors import (
    ConvergenceError,
    DomainError,
    InputError,
    LabelAmbiguityError,
    NonIdentifiabilityError,
    NumericalFailureError,
    RecoveryFailureError,
)
from metrics import track_operation
from oracle import CounterfactualLaw
from probability import CategoricalDomain, CondMatrix, FullLaw, condition, joint_table, marginalize
from structures import NO_TREATMENT, ProxyRoles, contexts

logger = logging.getLogger(__name__)

# Eigenvector columns whose entries sum to less than this cannot be normalized
_MIN_COLUMN_SUM = 1e-9

# Slice mixtures worse conditioned than this give no usable eigen start
_MAX_START_CONDITION = 1e12


@dataclass(frozen=True, eq=False)
class ThreeWayArray:
    """f(w, z, y | context) with axes ordered (W, Z, Y)"""
    entries: np.ndarray
    axis_names: Tuple[str, str, str] = ("W", "Z", "Y")
    context: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 3:
            raise InputError(f"Three-way array must have 3 axes, got {entries.ndim}")
        if not np.all(np.isfinite(entries)) or np.any(entries < 0):
            raise InputError("Three-way array entries must be finite and non-negative")
        total = float(entries.sum())
        if total > 1.0 + DEFAULT_TOLERANCES.normalization:
            raise InputError(f"Three-way array mass {total!r} exceeds 1", {"total": total})
        entries = entries.copy()
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "axis_names", tuple(self.axis_names))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.entries.shape

    def to_dict(self) -> Dict[str, Any]:
        return {"axes": list(self.axis_names), "dims": list(self.dims),
                "entries": [float(v) for v in self.entries.ravel()], "context": dict(self.context)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ThreeWayArray":
        try:
            dims = tuple(int(d) for d in data["dims"])
            entries = np.asarray(data["entries"], dtype=np.float64)
            if len(dims) != 3 or entries.size != int(np.prod(dims)):
                raise ValueError(f"{entries.size} entries do not fill dims {list(dims)}")
            return cls(entries.reshape(dims), tuple(data.get("axes", ("W", "Z", "Y"))),
                       dict(data.get("context", {})))
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"Malformed tensor JSON: {e}")


@dataclass
class CpFactors:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def reconstruct(self) -> np.ndarray:
        return np.einsum("wr,zr,jr->wzj", self.a, self.b, self.c)

    def normalized(self) -> "CpFactors":
        """Columns of A and B scaled to unit sum; the scale moves into C"""
        scale_a = _column_scale(self.a)
        scale_b = _column_scale(self.b)
        return CpFactors(self.a / scale_a, self.b / scale_b, self.c * (scale_a * scale_b))

    def to_dict(self) -> Dict[str, Any]:
        return {"rank": self.rank, "A": self.a.tolist(), "B": self.b.tolist(), "C": self.c.tolist()}


def _column_scale(matrix: np.ndarray) -> np.ndarray:
    sums = matrix.sum(axis=0)
    norms = np.linalg.norm(matrix, axis=0)
    scale = np.where(np.abs(sums) > _MIN_COLUMN_SUM, sums, norms)
    return np.where(scale == 0.0, 1.0, scale)


@dataclass
class CpResult:
    factors: CpFactors
    relative_error: float
    converged: bool
    iterations: int
    restart: int
    restarts: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {"factors": self.factors.to_dict(), "relative_error": self.relative_error,
                "converged": self.converged, "iterations": self.iterations,
                "best_restart": self.restart, "restarts": self.restarts}


@dataclass
class KruskalCertificate:
    holds: bool
    margin: int
    k_a: int
    k_b: int
    k_c: int
    rank: int
    dims: Tuple[int, int, int]
    category_count_ok: bool

    def to_dict(self) -> Dict[str, Any]:
        return {"holds": self.holds, "margin": self.margin, "k_a": self.k_a, "k_b": self.k_b,
                "k_c": self.k_c, "rank": self.rank, "dims": list(self.dims),
                "category_count_ok": self.category_count_ok}


@dataclass
class LatentRecovery:
    """Latent factors recovered from the observed law, aligned across treatment levels"""
    latent: CategoricalDomain
    p_w_given_u: CondMatrix
    p_z_given_ua: Dict[str, CondMatrix]
    p_y_given_ua: Dict[str, CondMatrix]
    f_u_given_a: Dict[str, np.ndarray]
    f_u: np.ndarray
    method: str
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    label_permutation: Optional[Dict[int, float]] = None

    @property
    def latent_cardinality(self) -> int:
        return self.latent.cardinality

    def counterfactual(self, treatment: CategoricalDomain, outcome: CategoricalDomain) -> CounterfactualLaw:
        """f_{Y(a)} = P_{Y|U,a} f_U for every treatment level"""
        table = np.column_stack([self.p_y_given_ua[label].entries @ self.f_u for label in treatment.labels])
        return CounterfactualLaw(treatment, outcome, table)

    def with_labels(self, assignment: "LabelAssignment") -> "LatentRecovery":
        """Copy carrying the ordinal label of each recovered latent state"""
        return replace(self, label_permutation=dict(assignment.labels))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "latent_cardinality": self.latent_cardinality,
            "p_w_given_u": self.p_w_given_u.entries.tolist(),
            "p_z_given_ua": {k: m.entries.tolist() for k, m in self.p_z_given_ua.items()},
            "p_y_given_ua": {k: m.entries.tolist() for k, m in self.p_y_given_ua.items()},
            "f_u_given_a": {k: v.tolist() for k, v in self.f_u_given_a.items()},
            "f_u": self.f_u.tolist(),
            "label_permutation": ({str(k): v for k, v in self.label_permutation.items()}
                                  if self.label_permutation is not None else None),
            "diagnostics": self.diagnostics,
        }


@dataclass
class ArrayIdentification:
    recovery: LatentRecovery
    counterfactual: Optional[CounterfactualLaw]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.recovery.method,
            "recovery": self.recovery.to_dict(),
            "counterfactual": self.counterfactual.to_dict() if self.counterfactual else None,
        }


@dataclass
class LabelAssignment:
    proxy: str
    functional: str
    mode: str
    direction: str
    values: List[float]
    labels: Dict[int, float]

    def to_dict(self) -> Dict[str, Any]:
        return {"proxy": self.proxy, "functional": self.functional, "mode": self.mode,
                "direction": self.direction, "values": self.values,
                "labels": {str(k): v for k, v in self.labels.items()}}


# ---------------------------------------------------------------------------
# k-rank and Kruskal's condition
# ---------------------------------------------------------------------------

def k_rank(matrix: np.ndarray, tol: Optional[float] = None) -> int:
    """Largest k such that every k columns are linearly independent.

    Columns are scaled to unit norm first, so the result does not change
    when a column is rescaled by a nonzero factor.
    """
    tol = DEFAULT_TOLERANCES.rank if tol is None else tol
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise DomainError(f"k-rank needs a matrix, got {m.ndim} axes")
    rows, cols = m.shape
    if rows == 0 or cols == 0:
        return 0

    norms = np.linalg.norm(m, axis=0)
    unit = np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)

    best = 0
    for k in range(1, min(rows, cols) + 1):
        for subset in itertools.combinations(range(cols), k):
            s = linalg.svdvals(unit[:, subset])
            if s[0] <= 0.0 or s[-1] <= tol * s[0]:
                return best
        best = k
    return best


def condition_number(matrix: np.ndarray) -> float:
    """Ratio of extreme singular values; inf when rank deficient"""
    s = linalg.svdvals(np.asarray(matrix, dtype=np.float64))
    if s.size == 0 or s[-1] <= 0.0:
        return float("inf")
    return float(s[0] / s[-1])


def distinct_row_margin(matrix: np.ndarray) -> float:
    """Best row's smallest gap between entries: positive iff some row separates every column"""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape[1] < 2:
        return float("inf")
    return max(_min_gap(row) for row in m)


def kruskal_margin(k_a: int, k_b: int, k_c: int, rank: int) -> int:
    """k_A + k_B + k_C - (2R + 2); uniqueness holds when non-negative"""
    return k_a + k_b + k_c - (2 * rank + 2)


def check_kruskal(factors: CpFactors, tol: Optional[float] = None) -> KruskalCertificate:
    if not (factors.a.shape[1] == factors.b.shape[1] == factors.c.shape[1]):
        raise DomainError("CP factors must share the same number of columns")
    rank = factors.rank
    k_a, k_b, k_c = (k_rank(m, tol) for m in (factors.a, factors.b, factors.c))
    margin = kruskal_margin(k_a, k_b, k_c, rank)
    dims = (factors.a.shape[0], factors.b.shape[0], factors.c.shape[0])
    return KruskalCertificate(holds=margin >= 0, margin=margin, k_a=k_a, k_b=k_b, k_c=k_c, rank=rank,
                              dims=dims, category_count_ok=sum(dims) >= 2 * rank + 2)


# ---------------------------------------------------------------------------
# Slices
# ---------------------------------------------------------------------------

def build_slices(observed: FullLaw, level: Optional[str], roles: ProxyRoles = ProxyRoles()) -> ThreeWayArray:
    """f(W, Z, Y | A = level); ConditioningError when the level has no mass"""
    context = {roles.treatment: level} if roles.treatment and level not in (None, NO_TREATMENT) else {}
    table = condition(observed, [roles.proxy_w, roles.proxy_z, roles.outcome], context)
    return ThreeWayArray(table.probabilities, (roles.proxy_w, roles.proxy_z, roles.outcome),
                         {k: str(v) for k, v in context.items()})


def _min_gap(values: np.ndarray) -> float:
    values = np.asarray(values).ravel()
    if values.size < 2:
        return float("inf")
    diffs = np.abs(values[:, None] - values[None, :])
    return float(diffs[~np.eye(values.size, dtype=bool)].min())


def _as_probability_columns(matrix: np.ndarray, what: str, level: str, tol: Tolerances) -> np.ndarray:
    """Reject clearly negative entries, clip the rest at zero and renormalize columns"""
    most_negative = float(matrix.min())
    if most_negative < -tol.negative_probability:
        raise RecoveryFailureError(
            f"Recovered {what} for level {level} has entry {most_negative:.3e}",
            {"level": level, "factor": what, "min_entry": most_negative})
    matrix = np.clip(matrix, 0.0, None)
    sums = matrix.sum(axis=0)
    if np.any(sums <= 0.0):
        raise RecoveryFailureError(f"Recovered {what} for level {level} has an empty column",
                                   {"level": level, "factor": what})
    return matrix / sums


@dataclass
class _ContextEstimate:
    level: str
    p_w: np.ndarray
    p_z: np.ndarray
    p_y: np.ndarray
    f_u: np.ndarray
    diagnostics: Dict[str, Any]

    def permuted(self, perm: np.ndarray) -> "_ContextEstimate":
        return _ContextEstimate(self.level, self.p_w[:, perm], self.p_z[:, perm], self.p_y[:, perm],
                                self.f_u[perm], self.diagnostics)


def _latent_marginals(p_w: np.ndarray, slices: ThreeWayArray, level: str, tol: Tolerances):
    """Given P_{W|U}, solve for f(z, u | a), f(y, u | a) and f(u | a)"""
    t = slices.entries
    try:
        f_uz = linalg.solve(p_w, t.sum(axis=2))
        f_uy = linalg.solve(p_w, t.sum(axis=1))
    except linalg.LinAlgError as e:
        raise RecoveryFailureError(f"Recovered P(W|U) at level {level} cannot be inverted: {e}",
                                   {"level": level, "p_w_given_u": p_w.tolist()})
    f_u = f_uy.sum(axis=1)
    if np.any(f_u <= 0.0):
        raise RecoveryFailureError(f"Recovered latent state with no mass at level {level}",
                                   {"level": level, "f_u": f_u.tolist()})
    p_z = _as_probability_columns((f_uz / f_u[:, None]).T, "P(Z|U,a)", level, tol)
    p_y = _as_probability_columns((f_uy / f_u[:, None]).T, "P(Y|U,a)", level, tol)
    return p_z, p_y, f_u / f_u.sum()


def _eigen_context(slices: ThreeWayArray, level: str, rng: np.random.Generator,
                   tol: Tolerances) -> _ContextEstimate:
    t = slices.entries
    n_w, n_z, n_y = t.shape
    if n_w != n_z:
        raise DomainError(f"Eigen recovery needs |W| = |Z|, got {n_w} and {n_z}")

    f_wz = t.sum(axis=2)
    s = linalg.svdvals(f_wz)
    if numerical_rank(s, tol.rank) < n_w:
        raise NonIdentifiabilityError(
            f"P(W|Z,a) is singular at level {level}; the proxies do not resolve the latent states",
            {"level": level, "singular_values": s.tolist()})

    # M_y = f(y, W, Z | a) f(W, Z | a)^{-1} = P_{W|U} diag(f(y | U, a)) P_{W|U}^{-1}
    slice_mats = [linalg.solve(f_wz.T, t[:, :, y].T).T for y in range(n_y)]
    gaps = [_min_gap(linalg.eigvals(m)) for m in slice_mats]
    chosen = int(np.argmax(gaps))
    matrix, gap, combined = slice_mats[chosen], gaps[chosen], False

    if gap < tol.eigen_gap:
        for attempt in range(SLICE_RETRIES):
            weights = rng.uniform(size=n_y)
            candidate = sum(w * m for w, m in zip(weights, slice_mats))
            candidate_gap = _min_gap(linalg.eigvals(candidate))
            logger.debug(f"Level {level}: random slice combination {attempt} has eigen gap {candidate_gap:.3e}")
            if candidate_gap > gap:
                matrix, gap, combined = candidate, candidate_gap, True
            if gap >= tol.eigen_gap:
                break

    if gap < tol.eigen_gap:
        raise NonIdentifiabilityError(
            f"No outcome slice separates the latent states at level {level} (eigen gap {gap:.3e}); "
            f"some row of P(Y|U,a) must have distinct entries",
            {"level": level, "gap": gap, "threshold": tol.eigen_gap})

    eigenvalues, vectors = linalg.eig(matrix)
    radius = float(np.max(np.abs(eigenvalues)))
    imaginary = float(np.max(np.abs(eigenvalues.imag)))
    if imaginary > tol.imaginary * max(radius, 1.0e-300):
        raise NumericalFailureError(
            f"Complex eigenvalues at level {level} (|imag| {imaginary:.3e}, radius {radius:.3e})",
            {"level": level, "imaginary": imaginary, "radius": radius})

    vectors = vectors.real
    sums = vectors.sum(axis=0)
    if np.any(np.abs(sums) < _MIN_COLUMN_SUM):
        raise RecoveryFailureError(f"Eigenvector with zero column sum at level {level}", {"level": level})
    p_w = _as_probability_columns(vectors / sums, "P(W|U)", level, tol)
    p_z, p_y, f_u = _latent_marginals(p_w, slices, level, tol)

    diagnostics = {"slice": None if combined else chosen, "random_combination": combined,
                   "eigen_gap": gap, "condition_number": float(s[0] / s[-1])}
    return _ContextEstimate(level, p_w, p_z, p_y, f_u, diagnostics)


# ---------------------------------------------------------------------------
# Alignment across treatment levels
# ---------------------------------------------------------------------------

def align_columns(reference: np.ndarray, estimate: np.ndarray) -> Tuple[np.ndarray, float]:
    """Permutation of estimate's columns minimizing total variation to the reference.

    Returns (perm, cost) where estimate[:, perm] lines up with reference.
    """
    n = reference.shape[1]
    cost = 0.5 * np.abs(reference[:, :, None] - estimate[:, None, :]).sum(axis=0)
    if n <= EXHAUSTIVE_ALIGNMENT_MAX:
        rows = np.arange(n)
        best = min(itertools.permutations(range(n)), key=lambda p: cost[rows, list(p)].sum())
        perm = np.array(best, dtype=int)
    else:
        _, perm = optimize.linear_sum_assignment(cost)
    return perm, float(cost[np.arange(n), perm].sum())


def _assemble(observed: FullLaw, roles: ProxyRoles, estimates: List[_ContextEstimate],
              method: str, latent_name: str) -> LatentRecovery:
    reference = estimates[0].p_w
    aligned = [estimates[0]]
    alignment_costs = {estimates[0].level: 0.0}
    for est in estimates[1:]:
        perm, cost = align_columns(reference, est.p_w)
        aligned.append(est.permuted(perm))
        alignment_costs[est.level] = cost

    if roles.treatment:
        f_a = joint_table(observed, [roles.treatment])
    else:
        f_a = np.ones(1)
    f_u = sum(w * est.f_u for w, est in zip(f_a, aligned))
    p_w = sum(w * est.p_w for w, est in zip(f_a, aligned))

    n = reference.shape[1]
    latent = CategoricalDomain.of_size(latent_name, n)
    w_domain = observed.domain(roles.proxy_w)
    z_domain = observed.domain(roles.proxy_z)
    y_domain = observed.domain(roles.outcome)

    def ctx(level: str) -> Dict[str, str]:
        return {roles.treatment: level} if roles.treatment else {}

    return LatentRecovery(
        latent=latent,
        p_w_given_u=CondMatrix(w_domain, latent, p_w),
        p_z_given_ua={e.level: CondMatrix(z_domain, latent, e.p_z, ctx(e.level)) for e in aligned},
        p_y_given_ua={e.level: CondMatrix(y_domain, latent, e.p_y, ctx(e.level)) for e in aligned},
        f_u_given_a={e.level: e.f_u for e in aligned},
        f_u=f_u / f_u.sum(),
        method=method,
        diagnostics={"levels": {e.level: e.diagnostics for e in aligned}, "alignment_cost": alignment_costs},
    )


def _levels(observed: FullLaw, roles: ProxyRoles) -> List[str]:
    labels = observed.domain(roles.treatment).labels if roles.treatment else ()
    return [label for label, _ in contexts(labels, roles.treatment)]


# ---------------------------------------------------------------------------
# Recovery entry points
# ---------------------------------------------------------------------------

@track_operation("recover_eigen")
def recover_eigen(law: FullLaw, roles: ProxyRoles = ProxyRoles(), tol: Tolerances = DEFAULT_TOLERANCES,
                  seed: int = 0, latent_name: str = "U") -> LatentRecovery:
    """Recover P(W|U), P(Z|U,a), P(Y|U,a) and f(U) by eigendecomposition of outcome slices"""
    observed = marginalize(law, roles.observed)
    rng = np.random.Generator(np.random.Philox(seed))
    estimates = []
    for level in _levels(observed, roles):
        slices = build_slices(observed, level, roles)
        estimates.append(_eigen_context(slices, level, rng, tol))
    logger.info(f"Eigen recovery found {estimates[0].p_w.shape[1]} latent states "
                f"over {len(estimates)} context(s)")
    return _assemble(observed, roles, estimates, "eigen", latent_name)


def _gevd_start(t: np.ndarray, modes: Tuple[int, int, int], rank: int,
                rng: np.random.Generator) -> Optional[List[np.ndarray]]:
    """Factors from the eigenvectors of two random mixtures of compressed slices.

    modes = (p, q, k): modes p and q need at least `rank` states, the slices
    run along k. Returns None when the second mixture is too ill-conditioned.
    """
    p, q, k = modes
    x = np.transpose(t, modes)
    n_p, n_q, n_k = x.shape
    u_p = linalg.svd(x.reshape(n_p, -1), full_matrices=False)[0][:, :rank]
    u_q = linalg.svd(np.transpose(x, (1, 0, 2)).reshape(n_q, -1), full_matrices=False)[0][:, :rank]
    core = np.einsum("ijk,ir,js->rsk", x, u_p, u_q)
    first = core @ rng.standard_normal(n_k)
    second = core @ rng.standard_normal(n_k)
    if np.linalg.cond(second) > _MAX_START_CONDITION:
        return None

    # first second^{-1} = A_p D A_p^{-1} with A_p = U_p^T A, so its eigenvectors give the mode-p factor
    _, vectors = linalg.eig(linalg.solve(second.T, first.T).T)
    f_p = u_p @ vectors.real
    # contracting mode p with f_p^+ leaves one rank-one matrix per component
    g = np.einsum("rp,pqk->rqk", linalg.pinv(f_p), x)
    f_q = np.empty((n_q, rank))
    f_k = np.empty((n_k, rank))
    for r in range(rank):
        left, values, right = linalg.svd(g[r], full_matrices=False)
        f_q[:, r] = left[:, 0] * values[0]
        f_k[:, r] = right[0]

    factors: List[np.ndarray] = [np.empty(0)] * 3
    factors[p], factors[q], factors[k] = f_p, f_q, f_k
    return factors


def _nvecs_start(t: np.ndarray, rank: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Leading left singular vectors of each unfolding, padded with random columns"""
    factors = []
    for mode in range(3):
        unfolded = np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1)
        vectors = linalg.svd(unfolded, full_matrices=False)[0][:, :rank]
        missing = rank - vectors.shape[1]
        if missing:
            vectors = np.hstack([vectors, rng.uniform(size=(t.shape[mode], missing))])
        factors.append(vectors)
    return factors


def _starting_points(t: np.ndarray, rank: int, restarts: int, seed: int):
    """Yield (init, [A, B, C]): structured starts first, then `restarts` random ones"""
    children = np.random.SeedSequence(seed).spawn(restarts + 1)
    structured = np.random.Generator(np.random.Philox(children[-1]))
    for modes in ((0, 1, 2), (0, 2, 1), (1, 2, 0)):
        if min(t.shape[modes[0]], t.shape[modes[1]]) < rank:
            continue
        try:
            factors = _gevd_start(t, modes, rank, structured)
        except linalg.LinAlgError as e:
            logger.debug(f"Skipping eigen start on modes {modes}: {e}")
            continue
        if factors is not None:
            yield "gevd:" + "".join("WZY"[m] for m in modes[:2]), factors
    yield "nvecs", _nvecs_start(t, rank, structured)
    for child in children[:-1]:
        rng = np.random.Generator(np.random.Philox(child))
        yield "random", [rng.uniform(size=(n, rank)) for n in t.shape]


@track_operation("recover_cp")
def recover_cp(tensor: ThreeWayArray, rank: int, restarts: int = ALS_RESTARTS, seed: int = 0,
               max_iterations: int = ALS_MAX_ITERATIONS, tolerance: float = ALS_TOLERANCE) -> CpResult:
    """Rank-R CP decomposition by alternating least squares.

    ALS runs from eigen-based starts for every mode pair with at least R
    states each, from the leading singular vectors of the unfoldings, and
    from `restarts` random nonnegative starts. A start converges once the
    fit changes by less than `tolerance` between sweeps. Every start draws
    from the seed, so the history is reproducible. Raises ConvergenceError
    only if no start converged.
    """
    if rank < 1:
        raise DomainError(f"CP rank must be >= 1, got {rank}")
    if restarts < 1:
        raise DomainError(f"Need at least one restart, got {restarts}")
    t = tensor.entries
    norm_t = float(np.linalg.norm(t))
    if norm_t == 0.0:
        raise DomainError("Cannot decompose an all-zero array")

    best: Optional[CpResult] = None
    history: List[Dict[str, Any]] = []
    for index, (init, (a, b, c)) in enumerate(_starting_points(t, rank, restarts, seed)):
        previous = np.inf
        error = np.inf
        converged = False
        iterations = 0
        for iterations in range(1, max_iterations + 1):
            a = np.einsum("wzj,zr,jr->wr", t, b, c) @ linalg.pinv((b.T @ b) * (c.T @ c))
            b = np.einsum("wzj,wr,jr->zr", t, a, c) @ linalg.pinv((a.T @ a) * (c.T @ c))
            c = np.einsum("wzj,wr,zr->jr", t, a, b) @ linalg.pinv((a.T @ a) * (b.T @ b))
            error = float(np.linalg.norm(t - np.einsum("wr,zr,jr->wzj", a, b, c)) / norm_t)
            if abs(previous - error) < tolerance:
                converged = True
                break
            previous = error

        history.append({"restart": index, "init": init, "relative_error": error, "iterations": iterations,
                        "converged": converged})
        logger.debug(f"ALS start {index} ({init}): error {error:.3e} after {iterations} iterations")
        if converged and (best is None or error < best.relative_error):
            best = CpResult(CpFactors(a, b, c), error, True, iterations, index)
        if best is not None and best.relative_error < tolerance:
            break

    if best is None:
        raise ConvergenceError(f"ALS did not converge from any of {len(history)} starts",
                               {"restarts": history, "rank": rank})
    best.factors = best.factors.normalized()
    best.restarts = history
    return best


def _cp_context(slices: ThreeWayArray, level: str, rank: int, restarts: int, seed: int,
                tol: Tolerances) -> _ContextEstimate:
    result = recover_cp(slices, rank, restarts=restarts, seed=seed)
    if result.relative_error > tol.cp_fit:
        raise ConvergenceError(
            f"Best rank-{rank} fit at level {level} leaves relative error {result.relative_error:.3e}",
            {"level": level, "relative_error": result.relative_error, "threshold": tol.cp_fit,
             "restarts": result.restarts})
    factors = result.factors
    p_w = _as_probability_columns(factors.a, "P(W|U)", level, tol)
    p_z = _as_probability_columns(factors.b, "P(Z|U,a)", level, tol)
    f_u = factors.c.sum(axis=0)
    if np.any(f_u <= 0.0):
        raise RecoveryFailureError(f"Recovered latent state with no mass at level {level}",
                                   {"level": level, "f_u": f_u.tolist()})
    p_y = _as_probability_columns(factors.c / f_u, "P(Y|U,a)", level, tol)
    diagnostics = {"relative_error": result.relative_error, "iterations": result.iterations,
                   "best_restart": result.restart}
    return _ContextEstimate(level, p_w, p_z, p_y, f_u / f_u.sum(), diagnostics)


@track_operation("identify_array")
def identify_array(law: FullLaw, method: str = "eigen", roles: ProxyRoles = ProxyRoles(),
                   tol: Tolerances = DEFAULT_TOLERANCES, rank: Optional[int] = None,
                   restarts: int = ALS_RESTARTS, seed: int = 0) -> ArrayIdentification:
    """Recover the latent factors and, when there is a treatment, f_{Y(a)} = P_{Y|U,a} f_U.

    In cp mode the rank defaults to max(|W|, |Z|).
    """
    observed = marginalize(law, roles.observed)
    if method == "eigen":
        recovery = recover_eigen(observed, roles, tol, seed)
    elif method == "cp":
        if rank is None:
            rank = max(observed.cardinality(roles.proxy_w), observed.cardinality(roles.proxy_z))
        estimates = [_cp_context(build_slices(observed, level, roles), level, rank, restarts, seed, tol)
                     for level in _levels(observed, roles)]
        recovery = _assemble(observed, roles, estimates, "cp", "U")
    else:
        raise DomainError(f"Unknown array method '{method}'", {"known": ["eigen", "cp"]})

    counterfactual = None
    if roles.treatment:
        counterfactual = recovery.counterfactual(observed.domain(roles.treatment), observed.domain(roles.outcome))
    return ArrayIdentification(recovery, counterfactual)


@track_operation("identify_mediator_array")
def identify_mediator_array(law: FullLaw, roles: ProxyRoles = ProxyRoles(), tol: Tolerances = DEFAULT_TOLERANCES,
                            seed: int = 0, mediator: str = "M") -> ArrayIdentification:
    """Front-door effect through an unobserved mediator measured by W, Z and Y.

    f_{Y(a)}(y) = sum_{a', m} f(y | a', m) f(m | a) f(a'), with the mediator
    terms taken from the eigen recovery.
    """
    if not roles.treatment:
        raise DomainError("Mediator identification needs a treatment variable")
    observed = marginalize(law, roles.observed)
    recovery = recover_eigen(observed, roles, tol, seed, latent_name=mediator)

    treatment = observed.domain(roles.treatment)
    f_a = joint_table(observed, [roles.treatment])
    columns = []
    for level in treatment.labels:
        f_m = recovery.f_u_given_a[level]
        columns.append(sum(weight * (recovery.p_y_given_ua[other].entries @ f_m)
                           for weight, other in zip(f_a, treatment.labels)))
    counterfactual = CounterfactualLaw(treatment, observed.domain(roles.outcome), np.column_stack(columns))
    return ArrayIdentification(recovery, counterfactual)


# ---------------------------------------------------------------------------
# Ordinal labels
# ---------------------------------------------------------------------------

def _functional_value(probabilities: np.ndarray, values: np.ndarray, functional: str) -> float:
    if functional == "mean":
        return float(probabilities @ values)
    if functional == "median":
        order = np.argsort(values, kind="stable")
        cumulative = np.cumsum(probabilities[order])
        index = int(np.argmax(cumulative >= 0.5 - DEFAULT_TOLERANCES.normalization))
        return float(values[order][index])
    raise DomainError(f"Unknown functional '{functional}'", {"known": ["mean", "median"]})


def recover_labels(recovery: LatentRecovery, proxy: str = "W", functional: str = "mean",
                   mode: str = "monotonicity", ordinal_values: Optional[Mapping[str, float]] = None,
                   latent_values: Optional[Sequence[float]] = None, level: Optional[str] = None,
                   direction: str = "ascending", tol: Optional[float] = None) -> LabelAssignment:
    """Map recovered latent indices to ordinal latent values.

    `proxy` is one of W, Z, Y; Z and Y are read at treatment `level` (first
    level by default). In monotonicity mode the ordering of the proxy
    functional gives the labels and `direction` is reported back. In
    unbiasedness mode each latent value is matched with the state whose
    functional equals it.
    """
    tol = DEFAULT_TOLERANCES.label if tol is None else tol
    if proxy == "W":
        matrix = recovery.p_w_given_u
    elif proxy in ("Z", "Y"):
        table = recovery.p_z_given_ua if proxy == "Z" else recovery.p_y_given_ua
        level = level if level is not None else next(iter(table))
        if level not in table:
            raise DomainError(f"Unknown treatment level '{level}'", {"known": list(table)})
        matrix = table[level]
    else:
        raise DomainError(f"Unknown proxy '{proxy}'", {"known": ["W", "Z", "Y"]})

    states = matrix.row_domain.labels
    if ordinal_values is None:
        values = np.arange(len(states), dtype=np.float64)
    else:
        missing = [s for s in states if s not in ordinal_values]
        if missing:
            raise DomainError(f"No ordinal value for proxy states {missing}")
        values = np.array([float(ordinal_values[s]) for s in states])

    n = recovery.latent_cardinality
    functionals = np.array([_functional_value(matrix.entries[:, i], values, functional) for i in range(n)])
    gap = _min_gap(functionals)
    if gap <= tol:
        raise LabelAmbiguityError(f"Proxy {functional} values tie across latent states (gap {gap:.3e})",
                                  {"values": functionals.tolist()})

    if mode == "monotonicity":
        if direction not in ("ascending", "descending"):
            raise DomainError(f"Unknown direction '{direction}'")
        targets = sorted(latent_values) if latent_values is not None else list(range(n))
        if len(targets) != n:
            raise DomainError(f"Need {n} latent values, got {len(targets)}")
        order = np.argsort(functionals, kind="stable")
        if direction == "descending":
            order = order[::-1]
        labels = {int(i): float(targets[rank]) for rank, i in enumerate(order)}
    elif mode == "unbiasedness":
        if latent_values is None or len(latent_values) != n:
            raise DomainError(f"Unbiasedness labelling needs {n} latent values")
        labels = {}
        for target in latent_values:
            index = int(np.argmin(np.abs(functionals - target)))
            mismatch = abs(functionals[index] - target)
            if mismatch > tol or index in labels:
                raise LabelAmbiguityError(
                    f"No latent state has proxy {functional} equal to {target} (closest off by {mismatch:.3e})",
                    {"target": float(target), "values": functionals.tolist()})
            labels[index] = float(target)
        direction = "ascending"
    else:
        raise DomainError(f"Unknown labelling mode '{mode}'", {"known": ["monotonicity", "unbiasedness"]})

    return LabelAssignment(proxy=proxy, functional=functional, mode=mode, direction=direction,
                           values=functionals.tolist(), labels=labels)
