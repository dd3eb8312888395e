"""
Synthetic ground-truth models: random discrete laws that factorize along a
structure's DAG, and the Gaussian linear SEM used for the overlap example.
"""

import logging
import string
from collections import Counter
from dataclasses import dataclass, fields
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from bridge import check_completeness_discrete, solve_bridge
from config import (
    DEFAULT_TOLERANCES,
    GENERATOR_MAX_CONDITION,
    GENERATOR_MAX_RETRIES,
    GENERATOR_MIN_GAP,
    GENERATOR_MIN_LATENT_MASS,
    Tolerances,
)
from errors import ConditioningError, DomainError, GenerationError, InputError
from metrics import track_operation
from probability import CategoricalDomain, FullLaw, cond_matrix, condition, joint_table, observe
from structures import Structure, StructureInfo, contexts, structure_info
from tensor import CpFactors, check_kruskal, condition_number, distinct_row_margin

logger = logging.getLogger(__name__)

CONSTRAINT_FLAGS = (
    "force_invertible",
    "force_distinct_rows",
    "force_bridge_solvable",
    "force_kruskal",
    "force_monotone_proxy",
)


@dataclass(frozen=True)
class ModelSpec:
    structure: Structure
    cardinalities: Dict[str, int]
    seed: int
    constraints: Tuple[str, ...] = ()
    include_optional_edges: bool = True
    shared_outcome_columns: bool = False

    def __post_init__(self):
        structure = Structure.parse(self.structure)
        object.__setattr__(self, "structure", structure)
        info = structure_info(structure)

        if set(self.cardinalities) != set(info.variables):
            raise DomainError(f"Cardinalities must cover exactly {list(info.variables)}, "
                              f"got {sorted(self.cardinalities)}")
        cards = {name: int(self.cardinalities[name]) for name in info.variables}
        for name, card in cards.items():
            if card < 1:
                raise DomainError(f"Cardinality of '{name}' must be >= 1, got {card}", {"variable": name})
        object.__setattr__(self, "cardinalities", cards)

        if not 0 <= int(self.seed) < 2 ** 64:
            raise DomainError(f"Seed must be a 64-bit unsigned integer, got {self.seed}")
        object.__setattr__(self, "seed", int(self.seed))

        constraints = tuple(sorted(set(self.constraints)))
        unknown = [c for c in constraints if c not in CONSTRAINT_FLAGS]
        if unknown:
            raise DomainError(f"Unknown constraint flags {unknown}", {"known": list(CONSTRAINT_FLAGS)})
        if constraints and info.roles is None:
            raise DomainError(f"Constraint flags need a proxy structure, not {structure.value}")
        if "force_bridge_solvable" in constraints and not info.has_bridge:
            raise DomainError(f"Structure {structure.value} has no outcome bridge to enforce")
        object.__setattr__(self, "constraints", constraints)

    @property
    def info(self) -> StructureInfo:
        return structure_info(self.structure)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "structure": self.structure.value,
            "cardinalities": dict(self.cardinalities),
            "seed": self.seed,
            "constraints": list(self.constraints),
            "include_optional_edges": self.include_optional_edges,
            "shared_outcome_columns": self.shared_outcome_columns,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelSpec":
        try:
            return cls(
                structure=data["structure"],
                cardinalities=dict(data["cardinalities"]),
                seed=data["seed"],
                constraints=tuple(data.get("constraints", ())),
                include_optional_edges=bool(data.get("include_optional_edges", True)),
                shared_outcome_columns=bool(data.get("shared_outcome_columns", False)),
            )
        except (KeyError, TypeError) as e:
            raise InputError(f"Malformed model spec JSON: {e}")


@dataclass
class LatentFactors:
    """True factor matrices of a proxy structure, read off the latent-visible law"""
    latent: str
    levels: List[str]
    p_w_given_u: np.ndarray
    p_z_given_ua: Dict[str, np.ndarray]
    p_y_given_ua: Dict[str, np.ndarray]
    f_u_given_a: Dict[str, np.ndarray]
    f_u: np.ndarray


def true_factors(law: FullLaw, info: StructureInfo) -> LatentFactors:
    if info.roles is None or info.proxy_latent is None:
        raise DomainError(f"Structure {info.structure.value} has no proxy roles")
    roles, latent = info.roles, info.proxy_latent
    labels = law.domain(roles.treatment).labels if roles.treatment else ()
    levels = contexts(labels, roles.treatment)

    p_z, p_y, f_u_given_a = {}, {}, {}
    for label, context in levels:
        p_z[label] = cond_matrix(law, roles.proxy_z, latent, context).entries
        p_y[label] = cond_matrix(law, roles.outcome, latent, context).entries
        f_u_given_a[label] = condition(law, [latent], context).probabilities
    return LatentFactors(
        latent=latent,
        levels=[label for label, _ in levels],
        p_w_given_u=cond_matrix(law, roles.proxy_w, latent).entries,
        p_z_given_ua=p_z,
        p_y_given_ua=p_y,
        f_u_given_a=f_u_given_a,
        f_u=joint_table(law, [latent]),
    )


def _violations(law: FullLaw, spec: ModelSpec, tol: Tolerances) -> List[str]:
    """Names of the requested constraints the law fails"""
    if not spec.constraints:
        return []
    info = spec.info
    try:
        factors = true_factors(law, info)
    except ConditioningError:
        return ["positivity"]

    failed = []
    if "force_invertible" in spec.constraints:
        matrices = [factors.p_w_given_u] + list(factors.p_z_given_ua.values())
        if (any(condition_number(m) > GENERATOR_MAX_CONDITION for m in matrices)
                or min(v.min() for v in factors.f_u_given_a.values()) < GENERATOR_MIN_LATENT_MASS):
            failed.append("force_invertible")
    if "force_distinct_rows" in spec.constraints:
        if any(distinct_row_margin(m) < GENERATOR_MIN_GAP for m in factors.p_y_given_ua.values()):
            failed.append("force_distinct_rows")
    if "force_bridge_solvable" in spec.constraints:
        observed = observe(law, info.latent)
        for level in factors.levels:
            complete = check_completeness_discrete(law, level, info.roles, factors.latent, tol).complete
            if not complete or not solve_bridge(observed, level, info.roles, tol).solvable:
                failed.append("force_bridge_solvable")
                break
    if "force_kruskal" in spec.constraints:
        for level in factors.levels:
            cp = CpFactors(factors.p_w_given_u, factors.p_z_given_ua[level], factors.p_y_given_ua[level])
            if not check_kruskal(cp, tol.rank).holds:
                failed.append("force_kruskal")
                break
    if "force_monotone_proxy" in spec.constraints:
        means = np.arange(factors.p_w_given_u.shape[0]) @ factors.p_w_given_u
        if np.any(np.diff(means) < GENERATOR_MIN_GAP):
            failed.append("force_monotone_proxy")
    return failed


def _sample_factors(spec: ModelSpec, rng: np.random.Generator) -> Dict[str, Tuple[List[str], np.ndarray]]:
    """One conditional table f(v | parents) per variable, last axis over v"""
    info = spec.info
    cards = spec.cardinalities
    tables = {}
    for variable in info.topological_order(spec.include_optional_edges):
        parents = info.parents(variable, spec.include_optional_edges)
        shape = tuple(cards[p] for p in parents)
        if cards[variable] == 1:
            table = np.ones(shape + (1,))
        else:
            table = rng.dirichlet(np.ones(cards[variable]), size=shape or None)

        latent_axis = parents.index(info.proxy_latent) if info.proxy_latent in parents else None
        if spec.shared_outcome_columns and variable == info.outcome and latent_axis is not None:
            first = np.take(table, [0], axis=latent_axis)
            table = np.repeat(first, cards[info.proxy_latent], axis=latent_axis)
        if ("force_monotone_proxy" in spec.constraints and info.roles is not None
                and variable == info.roles.proxy_w and parents == [info.proxy_latent]):
            means = table @ np.arange(cards[variable])
            table = table[np.argsort(means, kind="stable")]
        tables[variable] = (parents, table)
    return tables


def _joint(spec: ModelSpec, tables: Dict[str, Tuple[List[str], np.ndarray]]) -> np.ndarray:
    variables = spec.info.variables
    letters = dict(zip(variables, string.ascii_lowercase))
    subscripts = ["".join(letters[p] for p in parents) + letters[v] for v, (parents, _) in tables.items()]
    output = "".join(letters[v] for v in variables)
    joint = np.einsum(",".join(subscripts) + "->" + output, *(t for _, t in tables.values()))
    return joint / joint.sum()


@track_operation("generate")
def generate(spec: ModelSpec, tol: Tolerances = DEFAULT_TOLERANCES) -> FullLaw:
    """Random law Markov to the ModelSpec structure, honoring its constraint flags.

    Each conditional factor is drawn uniformly from the simplex; constraints
    are enforced by rejection, deterministic in the seed.
    """
    info = spec.info
    if "force_invertible" in spec.constraints:
        roles, cards = info.roles, spec.cardinalities
        sizes = {cards[roles.proxy_w], cards[roles.proxy_z], cards[info.proxy_latent]}
        if len(sizes) != 1:
            raise GenerationError(f"force_invertible needs |{roles.proxy_w}| = |{roles.proxy_z}| = "
                                  f"|{info.proxy_latent}|, got {cards}", {"constraint": "force_invertible"})

    domains = tuple(CategoricalDomain.of_size(v, spec.cardinalities[v]) for v in info.variables)
    dag = tuple(info.graph(spec.include_optional_edges).edges())
    rng = np.random.Generator(np.random.Philox(spec.seed))
    failures: Counter = Counter()

    for attempt in range(GENERATOR_MAX_RETRIES):
        law = FullLaw(domains, _joint(spec, _sample_factors(spec, rng)), dag)
        failed = _violations(law, spec, tol)
        if not failed:
            if attempt:
                logger.debug(f"Generated {info.structure.value} model after {attempt + 1} attempts")
            return law
        failures.update(failed)

    constraint, count = failures.most_common(1)[0]
    raise GenerationError(
        f"No model satisfied {list(spec.constraints)} in {GENERATOR_MAX_RETRIES} attempts; "
        f"'{constraint}' failed most often ({count} times)",
        {"constraint": constraint, "failures": dict(failures)})


# ---------------------------------------------------------------------------
# Gaussian linear SEM
# ---------------------------------------------------------------------------

SEM_COLUMNS = ("U", "Z", "A", "W", "Y")


@dataclass(frozen=True)
class GaussianSem:
    """U = mu_u + eU; Z = beta0_z + alpha_uz U + eZ; A = beta0_a + alpha_ua U + alpha_za Z + eA;
    W = beta0_w + alpha_uw U + eW; Y = beta0_y + alpha_ay A + alpha_uy U + eY.

    The disturbances are independent mean-zero Gaussians with the var* variances.
    """
    mu_u: float = 0.0
    beta0_z: float = 0.0
    alpha_uz: float = 0.0
    beta0_a: float = 0.0
    alpha_ua: float = 0.0
    alpha_za: float = 0.0
    beta0_w: float = 0.0
    alpha_uw: float = 0.0
    beta0_y: float = 0.0
    alpha_ay: float = 0.0
    alpha_uy: float = 0.0
    var_u: float = 1.0
    var_z: float = 1.0
    var_a: float = 1.0
    var_w: float = 1.0
    var_y: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            value = float(getattr(self, f.name))
            if not np.isfinite(value):
                raise DomainError(f"SEM coefficient '{f.name}' must be finite")
            if f.name.startswith("var") and value <= 0.0:
                raise DomainError(f"SEM variance '{f.name}' must be positive, got {value}")
            object.__setattr__(self, f.name, value)

    def to_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GaussianSem":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"Unknown SEM coefficients {unknown}", {"known": sorted(known)})
        try:
            return cls(**{k: float(v) for k, v in data.items()})
        except (TypeError, ValueError) as e:
            raise InputError(f"Malformed SEM JSON: {e}")


def sem_counterfactual_mean(sem: GaussianSem, a: float) -> float:
    """E[Y(a)] = beta0_y + alpha_ay a + alpha_uy mu_u"""
    return sem.beta0_y + sem.alpha_ay * a + sem.alpha_uy * sem.mu_u


def sem_counterfactual_variance(sem: GaussianSem) -> float:
    """Var[Y(a)], which does not depend on a"""
    return sem.alpha_uy ** 2 * sem.var_u + sem.var_y


def sem_simulate(sem: GaussianSem, n: int, seed: int, intervention: Optional[float] = None) -> np.ndarray:
    """n ancestral draws of (U, Z, A, W, Y); `intervention` fixes A before Y is drawn"""
    if n < 1:
        raise DomainError(f"Need at least one draw, got {n}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n, 5)) * np.sqrt([sem.var_u, sem.var_z, sem.var_a, sem.var_w, sem.var_y])

    u = sem.mu_u + noise[:, 0]
    z = sem.beta0_z + sem.alpha_uz * u + noise[:, 1]
    if intervention is None:
        a = sem.beta0_a + sem.alpha_ua * u + sem.alpha_za * z + noise[:, 2]
    else:
        a = np.full(n, float(intervention))
    w = sem.beta0_w + sem.alpha_uw * u + noise[:, 3]
    y = sem.beta0_y + sem.alpha_ay * a + sem.alpha_uy * u + noise[:, 4]
    return np.column_stack([u, z, a, w, y])


def sem_observational_slope(sem: GaussianSem) -> float:
    """Population OLS slope of Y on A alone, cov(A, Y) / var(A)"""
    total_ua = sem.alpha_ua + sem.alpha_za * sem.alpha_uz
    var_a = total_ua ** 2 * sem.var_u + sem.alpha_za ** 2 * sem.var_z + sem.var_a
    cov_au = total_ua * sem.var_u
    return sem.alpha_ay + sem.alpha_uy * cov_au / var_a


def random_sem(seed: int, coefficient_range: Tuple[float, float] = (-2.0, 2.0),
               variance_range: Tuple[float, float] = (0.5, 2.0)) -> GaussianSem:
    rng = np.random.Generator(np.random.Philox(seed))
    values = {}
    for f in fields(GaussianSem):
        low, high = variance_range if f.name.startswith("var") else coefficient_range
        values[f.name] = float(rng.uniform(low, high))
    return GaussianSem(**values)
