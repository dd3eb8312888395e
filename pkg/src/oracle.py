"""
Ground-truth counterfactual laws from a latent-visible joint distribution.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional, Sequence

import numpy as np

from config import DEFAULT_TOLERANCES
from errors import ConditioningError, DomainError, InputError
from metrics import track_operation
from probability import CategoricalDomain, FullLaw, check_positivity, conditional_array, joint_table

logger = logging.getLogger(__name__)

# Identifiers leave column drift below this untouched, so counterfactual columns
# are validated against it rather than the joint-table normalization slack
_COLUMN_TOLERANCE = max(DEFAULT_TOLERANCES.normalization, DEFAULT_TOLERANCES.renormalize_drift)


@dataclass(frozen=True, eq=False)
class CounterfactualLaw:
    """Table of f_{Y(a)}(y): rows are outcome states, columns treatment levels"""
    treatment: CategoricalDomain
    outcome: CategoricalDomain
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        expected = (self.outcome.cardinality, self.treatment.cardinality)
        if table.shape != expected:
            raise InputError(f"Counterfactual table shape {table.shape} does not match {expected}")
        if not np.all(np.isfinite(table)) or np.any(table < 0):
            raise InputError("Counterfactual entries must be finite and non-negative")
        sums = table.sum(axis=0)
        if np.any(np.abs(sums - 1.0) > _COLUMN_TOLERANCE):
            raise InputError("Counterfactual columns must sum to 1", {"column_sums": sums.tolist()})
        table = table.copy()
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    def column(self, level: str) -> np.ndarray:
        return self.table[:, self.treatment.index(level)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "treatment": {"name": self.treatment.name, "labels": list(self.treatment.labels)},
            "outcome": {"name": self.outcome.name, "labels": list(self.outcome.labels)},
            "columns": {label: [float(v) for v in self.table[:, i]]
                        for i, label in enumerate(self.treatment.labels)},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CounterfactualLaw":
        try:
            treatment = CategoricalDomain(data["treatment"]["name"], tuple(data["treatment"]["labels"]))
            outcome = CategoricalDomain(data["outcome"]["name"], tuple(data["outcome"]["labels"]))
            columns = [data["columns"][label] for label in treatment.labels]
        except (KeyError, TypeError) as e:
            raise InputError(f"Malformed counterfactual JSON: {e}")
        return cls(treatment, outcome, np.array(columns, dtype=np.float64).T)


def max_deviation(left: CounterfactualLaw, right: CounterfactualLaw) -> float:
    """Largest absolute entrywise difference between two counterfactual tables"""
    if left.table.shape != right.table.shape:
        raise DomainError("Counterfactual tables have different shapes",
                          {"left": list(left.table.shape), "right": list(right.table.shape)})
    return float(np.max(np.abs(left.table - right.table)))


def _require_positive(law: FullLaw, names: Sequence[str]) -> None:
    min_mass, stratum = check_positivity(law, names)
    if min_mass <= 0.0:
        event = ", ".join(f"{k}={v}" for k, v in stratum.items())
        raise ConditioningError(f"Positivity violated: stratum {event} has zero probability",
                                {"stratum": stratum, "variables": list(names)})


@track_operation("adjust")
def adjust(law: FullLaw, confounders: Sequence[str], treatment: str = "A", outcome: str = "Y") -> CounterfactualLaw:
    """Back-door adjustment: f_{Y(a)}(y) = sum_c f(y | a, c) f(c)"""
    confounders = list(confounders)
    for name in [treatment, outcome] + confounders:
        law.axis(name)
    if treatment in confounders or outcome in confounders:
        raise DomainError("Adjustment set must not contain the treatment or outcome")

    _require_positive(law, [treatment] + confounders)

    given = [treatment] + confounders
    y_given = conditional_array(law, [outcome], given)
    if confounders:
        f_c = joint_table(law, confounders)
        letters = "bcdefghijk"[:len(confounders)]
        table = np.einsum(f"ya{letters},{letters}->ya", y_given, f_c)
    else:
        table = y_given

    logger.debug(f"Adjusted for {confounders or 'nothing'} over {law.cardinality(treatment)} treatment levels")
    return CounterfactualLaw(law.domain(treatment), law.domain(outcome), table)


def ace(cf: CounterfactualLaw, outcome_values: Optional[Mapping[str, float]] = None) -> float:
    """E[Y(a1)] - E[Y(a0)] for a binary treatment.

    `outcome_values` maps outcome labels to numbers; state indices are used when omitted.
    """
    if cf.treatment.cardinality != 2:
        raise DomainError(f"ACE needs a binary treatment, '{cf.treatment.name}' has "
                          f"{cf.treatment.cardinality} levels")
    if outcome_values is None:
        values = np.arange(cf.outcome.cardinality, dtype=np.float64)
    else:
        missing = [label for label in cf.outcome.labels if label not in outcome_values]
        if missing:
            raise DomainError(f"No numeric value for outcome states {missing}")
        values = np.array([float(outcome_values[label]) for label in cf.outcome.labels])
    means = values @ cf.table
    return float(means[1] - means[0])


@track_operation("frontdoor")
def frontdoor(law: FullLaw, mediator: str, treatment: str = "A", outcome: str = "Y") -> CounterfactualLaw:
    """Front-door formula: f_{Y(a)}(y) = sum_{a', m} f(y | a', m) f(m | a) f(a')"""
    for name in (mediator, treatment, outcome):
        law.axis(name)
    _require_positive(law, [treatment, mediator])

    y_given_am = conditional_array(law, [outcome], [treatment, mediator])
    m_given_a = conditional_array(law, [mediator], [treatment])
    f_a = joint_table(law, [treatment])
    table = np.einsum("ybm,ma,b->ya", y_given_am, m_given_a, f_a)
    return CounterfactualLaw(law.domain(treatment), law.domain(outcome), table)
