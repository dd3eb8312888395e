"""
Exact finite-probability algebra over named categorical variables.

Joint tables are dense float64 arrays whose axes are addressed by variable
name. Flattening is row-major in domain order: the last-listed domain varies
fastest.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config import DEFAULT_TOLERANCES
from errors import ConditioningError, DomainError, InputError

logger = logging.getLogger(__name__)

State = Union[int, str]


@dataclass(frozen=True)
class CategoricalDomain:
    """A named variable with ordered state labels"""
    name: str
    labels: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(str(label) for label in self.labels))
        if not self.name:
            raise DomainError("Variable name must be non-empty")
        if len(self.labels) < 1:
            raise DomainError(f"Variable '{self.name}' needs at least one state", {"variable": self.name})
        if len(set(self.labels)) != len(self.labels):
            raise DomainError(f"Variable '{self.name}' has duplicate state labels", {"variable": self.name})

    @property
    def cardinality(self) -> int:
        return len(self.labels)

    @classmethod
    def of_size(cls, name: str, cardinality: int) -> "CategoricalDomain":
        if cardinality < 1:
            raise DomainError(f"Cardinality of '{name}' must be >= 1, got {cardinality}", {"variable": name})
        prefix = name.lower()
        return cls(name, tuple(f"{prefix}{i}" for i in range(cardinality)))

    def index(self, state: State) -> int:
        """Position of a state given either its label or its integer index"""
        if isinstance(state, str):
            try:
                return self.labels.index(state)
            except ValueError:
                raise DomainError(f"Unknown state '{state}' for variable '{self.name}'",
                                  {"variable": self.name, "state": state})
        index = int(state)
        if not 0 <= index < self.cardinality:
            raise DomainError(f"State index {index} out of range for variable '{self.name}'",
                              {"variable": self.name, "state": index})
        return index


def _freeze(array: np.ndarray) -> np.ndarray:
    frozen = np.array(array, dtype=np.float64, copy=True)
    frozen.setflags(write=False)
    return frozen


@dataclass(frozen=True, eq=False)
class FullLaw:
    """Joint distribution over named categorical variables"""
    domains: Tuple[CategoricalDomain, ...]
    probabilities: np.ndarray
    dag: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self):
        domains = tuple(self.domains)
        names = [d.name for d in domains]
        if len(set(names)) != len(names):
            raise DomainError(f"Duplicate variable names in {names}")

        shape = tuple(d.cardinality for d in domains)
        probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if probabilities.size != int(np.prod(shape, dtype=np.int64)):
            raise InputError(f"Expected {int(np.prod(shape))} probabilities for shape {shape}, "
                             f"got {probabilities.size}")
        probabilities = probabilities.reshape(shape)

        if not np.all(np.isfinite(probabilities)):
            raise InputError("Probabilities must be finite")
        if np.any(probabilities < 0):
            raise InputError(f"Probabilities must be non-negative (min {probabilities.min():.3e})")
        total = float(probabilities.sum())
        if abs(total - 1.0) > DEFAULT_TOLERANCES.normalization:
            raise InputError(f"Probabilities sum to {total!r}, not 1", {"total": total})

        dag = tuple((str(parent), str(child)) for parent, child in self.dag)
        for parent, child in dag:
            if parent not in names or child not in names:
                raise DomainError(f"DAG edge ({parent}, {child}) references an unknown variable")

        object.__setattr__(self, "domains", domains)
        object.__setattr__(self, "probabilities", _freeze(probabilities))
        object.__setattr__(self, "dag", dag)

    @property
    def names(self) -> List[str]:
        return [d.name for d in self.domains]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.probabilities.shape

    def axis(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DomainError(f"Unknown variable '{name}' (have {self.names})", {"variable": name})

    def domain(self, name: str) -> CategoricalDomain:
        return self.domains[self.axis(name)]

    def cardinality(self, name: str) -> int:
        return self.domain(name).cardinality

    def fingerprint(self) -> str:
        """Stable digest of the domains and table"""
        digest = hashlib.sha256()
        for d in self.domains:
            digest.update(d.name.encode())
            digest.update("\x1f".join(d.labels).encode())
            digest.update(b"\x1e")
        digest.update(np.ascontiguousarray(self.probabilities).tobytes())
        return digest.hexdigest()


@dataclass(frozen=True, eq=False)
class CondMatrix:
    """Column-stochastic matrix: column c is f(row | col = c, context)"""
    row_domain: CategoricalDomain
    col_domain: CategoricalDomain
    entries: np.ndarray
    context: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        expected = (self.row_domain.cardinality, self.col_domain.cardinality)
        if entries.shape != expected:
            raise InputError(f"CondMatrix shape {entries.shape} does not match domains {expected}")
        tol = DEFAULT_TOLERANCES.normalization
        sums = entries.sum(axis=0)
        if np.any(entries < 0) or np.any(np.abs(sums - 1.0) > tol):
            raise InputError("CondMatrix columns must be probability vectors", {"column_sums": sums.tolist()})
        object.__setattr__(self, "entries", _freeze(entries))
        object.__setattr__(self, "context", dict(self.context))


def _check_names(law: FullLaw, names: Iterable[str]) -> List[str]:
    names = list(names)
    for name in names:
        law.axis(name)
    if len(set(names)) != len(names):
        raise DomainError(f"Repeated variable in {names}")
    return names


def joint_table(law: FullLaw, names: Sequence[str]) -> np.ndarray:
    """Marginal table over `names`, axes in the requested order"""
    names = _check_names(law, names)
    drop = tuple(i for i, n in enumerate(law.names) if n not in names)
    table = law.probabilities.sum(axis=drop) if drop else np.array(law.probabilities)
    kept = [n for n in law.names if n in names]
    return np.transpose(table, [kept.index(n) for n in names])


def marginalize(law: FullLaw, keep: Iterable[str]) -> FullLaw:
    """Sum out every variable not in `keep`; kept axes stay in law order"""
    keep = set(_check_names(law, keep))
    kept_names = [n for n in law.names if n in keep]
    if len(kept_names) == len(law.names):
        return law
    table = joint_table(law, kept_names)
    dag = tuple(edge for edge in law.dag if edge[0] in keep and edge[1] in keep)
    return FullLaw(tuple(law.domain(n) for n in kept_names), table, dag)


def observe(law: FullLaw, latent: Iterable[str]) -> FullLaw:
    """Observed-margin law: drop the latent axes"""
    latent = set(_check_names(law, latent))
    return marginalize(law, [n for n in law.names if n not in latent])


def _describe(law: FullLaw, assignment: Mapping[str, int]) -> str:
    return ", ".join(f"{name}={law.domain(name).labels[i]}" for name, i in assignment.items())


def _resolve(law: FullLaw, assignment: Optional[Mapping[str, State]]) -> Dict[str, int]:
    return {name: law.domain(name).index(state) for name, state in (assignment or {}).items()}


def condition(law: FullLaw, target: Sequence[str], given: Optional[Mapping[str, State]] = None) -> FullLaw:
    """f(target | given) as a normalized table over the target variables"""
    target = _check_names(law, target)
    given_idx = _resolve(law, given)
    overlap = set(target) & set(given_idx)
    if overlap:
        raise DomainError(f"Target and conditioning sets overlap on {sorted(overlap)}")

    names = target + list(given_idx)
    table = joint_table(law, names)
    index = tuple([slice(None)] * len(target) + [given_idx[n] for n in given_idx])
    sliced = table[index]
    mass = float(sliced.sum())
    if mass <= 0.0:
        event = _describe(law, given_idx)
        raise ConditioningError(f"Conditioning event has zero probability: {event}", {"event": event})
    return FullLaw(tuple(law.domain(n) for n in target), sliced / mass)


def conditional_array(law: FullLaw, target: Sequence[str], given: Sequence[str]) -> np.ndarray:
    """f(target | given) for every given stratum, axes ordered target then given.

    Raises ConditioningError on the first stratum with zero mass.
    """
    target = _check_names(law, target)
    given = _check_names(law, given)
    table = joint_table(law, list(target) + list(given))
    target_axes = tuple(range(len(target)))
    mass = table.sum(axis=target_axes, keepdims=True)
    if np.any(mass <= 0.0):
        stratum = np.argwhere(mass.reshape(mass.shape[len(target):]) <= 0.0)[0]
        event = _describe(law, dict(zip(given, (int(i) for i in stratum))))
        raise ConditioningError(f"Conditioning event has zero probability: {event}", {"event": event})
    return table / mass


def cond_matrix(law: FullLaw, row: str, col: str, context: Optional[Mapping[str, State]] = None) -> CondMatrix:
    """Column-stochastic matrix P_{row | col, context}"""
    context_idx = _resolve(law, context)
    if row in context_idx or col in context_idx:
        raise DomainError(f"Context {sorted(context_idx)} overlaps row/col variables")

    if row == col:
        names = [col] + list(context_idx)
        table = joint_table(law, names)[tuple([slice(None)] + [context_idx[n] for n in context_idx])]
        joint = np.diag(table)
    else:
        names = [row, col] + list(context_idx)
        table = joint_table(law, names)
        joint = table[tuple([slice(None), slice(None)] + [context_idx[n] for n in context_idx])]

    mass = joint.sum(axis=0)
    empty = np.flatnonzero(mass <= 0.0)
    if empty.size:
        event = _describe(law, {col: int(empty[0]), **context_idx})
        raise ConditioningError(f"Conditioning event has zero probability: {event}", {"event": event})

    labels = {name: law.domain(name).labels[i] for name, i in context_idx.items()}
    return CondMatrix(law.domain(row), law.domain(col), joint / mass, labels)


def ci_deviation(law: FullLaw, x: Sequence[str], y: Sequence[str], given: Sequence[str] = ()) -> float:
    """Max |f(x,y|g) - f(x|g)f(y|g)| over strata with positive mass"""
    return mutual_independence_deviation(law, [list(x), list(y)], given)


def check_ci(law: FullLaw, x: Sequence[str], y: Sequence[str], given: Sequence[str] = (),
             tol: Optional[float] = None) -> bool:
    """Numerical conditional-independence test X _||_ Y | given"""
    tol = DEFAULT_TOLERANCES.ci if tol is None else tol
    return ci_deviation(law, x, y, given) <= tol


def mutual_independence_deviation(law: FullLaw, groups: Sequence[Sequence[str]], given: Sequence[str] = ()) -> float:
    """Max deviation of f(g1,...,gk | given) from the product of its group marginals"""
    groups = [[name] if isinstance(name, str) else list(name) for name in groups]
    flat = [n for group in groups for n in group] + list(given)
    _check_names(law, flat)

    sizes = [int(np.prod([law.cardinality(n) for n in group], dtype=np.int64)) for group in groups]
    n_given = int(np.prod([law.cardinality(n) for n in given], dtype=np.int64)) if given else 1
    table = joint_table(law, flat).reshape(sizes + [n_given])

    k = len(groups)
    mass = table.sum(axis=tuple(range(k)))
    positive = mass > 0.0
    if not np.any(positive):
        return 0.0
    table = table[..., positive] / mass[positive]

    product = np.ones_like(table)
    for i in range(k):
        others = tuple(j for j in range(k) if j != i)
        marginal = table.sum(axis=others, keepdims=True) if others else table
        product = product * marginal
    return float(np.max(np.abs(table - product)))


def check_mutual_independence(law: FullLaw, names: Sequence[Union[str, Sequence[str]]], given: Sequence[str] = (),
                              tol: Optional[float] = None) -> bool:
    tol = DEFAULT_TOLERANCES.ci if tol is None else tol
    return mutual_independence_deviation(law, names, given) <= tol


def check_positivity(law: FullLaw, names: Sequence[str]) -> Tuple[float, Dict[str, str]]:
    """Smallest joint mass over the strata of `names` and the stratum attaining it"""
    table = joint_table(law, names)
    flat_index = int(np.argmin(table))
    stratum = np.unravel_index(flat_index, table.shape)
    labels = {name: law.domain(name).labels[int(i)] for name, i in zip(names, stratum)}
    return float(table.flat[flat_index]), labels


def law_to_dict(law: FullLaw) -> Dict[str, Any]:
    """Serialize to the JSON model format"""
    return {
        "domains": [{"name": d.name, "labels": list(d.labels)} for d in law.domains],
        "probabilities": [float(p) for p in law.probabilities.ravel(order="C")],
        "dag": [[parent, child] for parent, child in law.dag],
    }


def law_from_dict(data: Mapping[str, Any]) -> FullLaw:
    """Parse the JSON model format"""
    try:
        domains = tuple(CategoricalDomain(str(d["name"]), tuple(d["labels"])) for d in data["domains"])
        probabilities = np.asarray(data["probabilities"], dtype=np.float64)
        dag = tuple((edge[0], edge[1]) for edge in data.get("dag", []))
    except (KeyError, TypeError, IndexError, ValueError) as e:
        raise InputError(f"Malformed model JSON: {e}")
    return FullLaw(domains, probabilities, dag)
