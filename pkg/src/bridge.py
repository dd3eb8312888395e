"""
Outcome-bridge identification of f_{Y(a)} from two proxies of a discrete
latent confounder.

For every treatment level a we look for a |Y| x |W| matrix H_a with
P_{Y|Z,a} = H_a P_{W|Z,a}; the counterfactual column is then H_a f_W.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from scipy import linalg

from config import DEFAULT_TOLERANCES, Tolerances
from errors import IdentificationError, RecoveryFailureError
from metrics import track_operation
from oracle import CounterfactualLaw
from probability import FullLaw, cond_matrix, joint_table, marginalize
from structures import ProxyRoles

logger = logging.getLogger(__name__)


@dataclass
class CompletenessReport:
    """Rank check of P_{U|Z,a}: complete iff the latent states are all resolved"""
    complete: bool
    rank: int
    latent_cardinality: int
    singular_values: List[float]


@dataclass
class BridgeFit:
    level: str
    h: np.ndarray
    residual: float
    solvable: bool
    rank: int


@dataclass
class BridgeSolution:
    per_treatment: Dict[str, np.ndarray]
    residuals: Dict[str, float]
    counterfactual: CounterfactualLaw
    diagnostics: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": "bridge",
            "bridges": {label: h.tolist() for label, h in self.per_treatment.items()},
            "residuals": dict(self.residuals),
            "counterfactual": self.counterfactual.to_dict(),
            "diagnostics": self.diagnostics,
        }


def numerical_rank(singular_values: np.ndarray, tol: float) -> int:
    """Count singular values above tol times the largest one"""
    if singular_values.size == 0 or singular_values[0] <= 0.0:
        return 0
    return int(np.sum(singular_values > tol * singular_values[0]))


def truncated_pinv(matrix: np.ndarray, tol: float):
    """Moore-Penrose inverse from a thin SVD, dropping singular values below tol * max.

    Returns the inverse and the retained rank.
    """
    u, s, vt = linalg.svd(matrix, full_matrices=False)
    rank = numerical_rank(s, tol)
    inverse = vt[:rank].T @ np.diag(1.0 / s[:rank]) @ u[:, :rank].T
    return inverse, rank


def check_completeness_discrete(law: FullLaw, level: Optional[str], roles: ProxyRoles = ProxyRoles(),
                                latent: str = "U", tol: Tolerances = DEFAULT_TOLERANCES) -> CompletenessReport:
    """Is P_{U|Z,a} of full row rank |U|? Needs the latent-visible law."""
    context = {roles.treatment: level} if roles.treatment else {}
    p_u_given_z = cond_matrix(law, latent, roles.proxy_z, context).entries
    s = linalg.svdvals(p_u_given_z)
    rank = numerical_rank(s, tol.rank)
    n_latent = law.cardinality(latent)
    return CompletenessReport(complete=rank == n_latent, rank=rank, latent_cardinality=n_latent,
                              singular_values=[float(v) for v in s])


def solve_bridge(observed: FullLaw, level: Optional[str], roles: ProxyRoles = ProxyRoles(),
                 tol: Tolerances = DEFAULT_TOLERANCES) -> BridgeFit:
    """Least-squares H_a for P_{Y|Z,a} = H_a P_{W|Z,a} and its Frobenius residual"""
    context = {roles.treatment: level} if roles.treatment else {}
    p_y = cond_matrix(observed, roles.outcome, roles.proxy_z, context).entries
    p_w = cond_matrix(observed, roles.proxy_w, roles.proxy_z, context).entries

    inverse, rank = truncated_pinv(p_w, tol.rank)
    h = p_y @ inverse
    residual = float(linalg.norm(p_y - h @ p_w, "fro"))
    return BridgeFit(level=level, h=h, residual=residual, solvable=residual <= tol.solvability, rank=rank)


def _project_column(column: np.ndarray, tol: Tolerances, level: str) -> Dict[str, Any]:
    """Clip tiny negatives and renormalize in place; returns what was done"""
    most_negative = float(column.min())
    if most_negative < -tol.clip:
        raise RecoveryFailureError(
            f"Counterfactual column for level {level} has entry {most_negative:.3e} below clip tolerance",
            {"level": level, "min_entry": most_negative})

    clipped = most_negative < 0.0
    if clipped:
        column[column < 0.0] = 0.0
    drift = abs(float(column.sum()) - 1.0)
    renormalized = clipped or drift > tol.renormalize_drift
    if renormalized:
        logger.warning(f"Renormalizing counterfactual column for level {level} "
                       f"(min entry {most_negative:.3e}, drift {drift:.3e})")
        column /= column.sum()
    return {"drift": drift, "clipped": clipped, "renormalized": renormalized}


@track_operation("identify_bridge")
def identify_bridge(law: FullLaw, roles: ProxyRoles = ProxyRoles(),
                    tol: Tolerances = DEFAULT_TOLERANCES) -> BridgeSolution:
    """Identify f_{Y(a)} for every treatment level via outcome bridges.

    Only the observed roles of `law` are read.
    """
    if not roles.treatment:
        raise IdentificationError("Bridge identification needs a treatment variable")
    observed = marginalize(law, roles.observed)
    treatment = observed.domain(roles.treatment)
    outcome = observed.domain(roles.outcome)
    f_w = joint_table(observed, [roles.proxy_w])

    bridges: Dict[str, np.ndarray] = {}
    residuals: Dict[str, float] = {}
    diagnostics: Dict[str, Dict[str, Any]] = {}
    table = np.zeros((outcome.cardinality, treatment.cardinality))

    for i, level in enumerate(treatment.labels):
        fit = solve_bridge(observed, level, roles, tol)
        residuals[level] = fit.residual
        if not fit.solvable:
            raise IdentificationError(
                f"No outcome bridge for treatment level {level}: residual {fit.residual:.3e} "
                f"exceeds {tol.solvability:.1e}",
                {"level": level, "residual": fit.residual})
        bridges[level] = fit.h
        column = fit.h @ f_w
        diagnostics[level] = {"residual": fit.residual, "rank": fit.rank, **_project_column(column, tol, level)}
        table[:, i] = column
        logger.debug(f"Bridge for {roles.treatment}={level}: residual {fit.residual:.3e}, rank {fit.rank}")

    counterfactual = CounterfactualLaw(treatment, outcome, table)
    return BridgeSolution(per_treatment=bridges, residuals=residuals,
                          counterfactual=counterfactual, diagnostics=diagnostics)
