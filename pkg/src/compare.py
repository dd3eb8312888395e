"""
Assumption audits, the bridge-versus-array comparison grid, the search for
models separating the two approaches, and end-to-end comparison runs
against the oracle.
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from cachetools import LRUCache
from scipy import linalg

from bridge import check_completeness_discrete, identify_bridge, numerical_rank, solve_bridge
from config import CACHE_MAX_SIZE, DEFAULT_TOLERANCES, ENABLE_CACHING, THREAD_POOL_WORKERS, Tolerances
from errors import ProxidentError
from metrics import track_audit, track_cache_operation, track_operation, track_search_candidate
from models import (
    GaussianSem,
    LatentFactors,
    ModelSpec,
    generate,
    sem_counterfactual_mean,
    sem_observational_slope,
    sem_simulate,
    true_factors,
)
from oracle import CounterfactualLaw, adjust, frontdoor, max_deviation
from probability import FullLaw, check_positivity, law_to_dict, mutual_independence_deviation, observe
from structures import MarkovStatement, Structure, StructureInfo, structure_info
from tensor import (
    CpFactors,
    LatentRecovery,
    align_columns,
    check_kruskal,
    condition_number,
    distinct_row_margin,
    identify_array,
    identify_mediator_array,
)

logger = logging.getLogger(__name__)

# Candidates are audited in fixed-size batches so the evaluated count does not depend on --jobs
SEARCH_BATCH_SIZE = 32

_cache = LRUCache(maxsize=CACHE_MAX_SIZE) if ENABLE_CACHING else None
_cache_lock = threading.RLock()


class Table1Cell(str, Enum):
    BOTH = "BOTH"
    BRIDGE_ONLY = "BRIDGE_ONLY"
    KRUSKAL_ONLY = "KRUSKAL_ONLY"
    NEITHER = "NEITHER"


def get_cache_key(operation: str, **kwargs) -> str:
    """Generate a cache key for the given operation and parameters"""
    key_parts = [operation]
    for k, v in sorted(kwargs.items()):
        if v is not None:
            key_parts.append(f"{k}:{v}")
    return ":".join(key_parts)


def get_from_cache(key: str) -> Optional[Any]:
    """Get value from cache thread-safely"""
    if not ENABLE_CACHING or _cache is None:
        return None
    with _cache_lock:
        value = _cache.get(key)
    track_cache_operation("audit", value is not None)
    return value


def set_in_cache(key: str, value: Any) -> None:
    """Set value in cache thread-safely"""
    if not ENABLE_CACHING or _cache is None:
        return
    with _cache_lock:
        _cache[key] = value


def clear_cache() -> None:
    """Clear the entire cache"""
    if not ENABLE_CACHING or _cache is None:
        return
    with _cache_lock:
        _cache.clear()
        logger.info("Cache cleared")


# ---------------------------------------------------------------------------
# Audits
# ---------------------------------------------------------------------------

@dataclass
class AssumptionReport:
    """Verdicts and margins for every assumption set of a latent-visible law.

    Each set is a dict with `applicable`, `passed` and, when computed,
    per-treatment-level details under `levels`.
    """
    structure: str
    markov: Dict[str, Dict[str, Any]]
    positivity: Dict[str, Any]
    bridge_set: Dict[str, Any]
    kp_set1: Dict[str, Any]
    kp_relaxed: Dict[str, Any]
    kruskal_set2: Dict[str, Any]
    overlap_set2: Dict[str, Any]
    tolerances: Dict[str, float] = field(default_factory=dict)

    @property
    def markov_ok(self) -> bool:
        return all(entry["passed"] for entry in self.markov.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "structure": self.structure,
            "markov": self.markov,
            "positivity": self.positivity,
            "bridge_set": self.bridge_set,
            "kp_set1": self.kp_set1,
            "kp_relaxed": self.kp_relaxed,
            "kruskal_set2": self.kruskal_set2,
            "overlap_set2": self.overlap_set2,
            "tolerances": self.tolerances,
        }


def _not_applicable(reason: str) -> Dict[str, Any]:
    return {"applicable": False, "passed": False, "reason": reason}


def _per_level(levels: Dict[str, Dict[str, Any]], prerequisites_ok: bool,
               markov: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    passed = prerequisites_ok and all(entry["passed"] for entry in levels.values())
    result: Dict[str, Any] = {"applicable": True, "passed": passed, "levels": levels}
    if markov is not None:
        result["markov"] = markov
        result["passed"] = passed and markov["passed"]
    return result


def _markov(law: FullLaw, statements: Sequence[MarkovStatement], tol: Tolerances) -> Dict[str, Dict[str, Any]]:
    results = {}
    for statement in statements:
        deviation = mutual_independence_deviation(law, statement.groups, statement.given)
        results[statement.name] = {"deviation": deviation, "passed": deviation <= tol.ci}
    return results


def _positivity(law: FullLaw, info: StructureInfo) -> Dict[str, Any]:
    worst_mass, worst_stratum = float("inf"), {}
    for names in info.positivity:
        mass, stratum = check_positivity(law, names)
        if mass < worst_mass:
            worst_mass, worst_stratum = mass, stratum
    return {"passed": worst_mass > 0.0, "min_mass": worst_mass, "stratum": worst_stratum}


def _factor_sets(law: FullLaw, info: StructureInfo, factors: LatentFactors, prerequisites_ok: bool,
                 tol: Tolerances) -> Dict[str, Dict[str, Any]]:
    roles = info.roles
    # the array sets rest on the latent-proxy independences whatever the graph implies
    statements = _markov(law, info.array_markov, tol)
    array_markov = {"statements": statements,
                    "deviation": max((s["deviation"] for s in statements.values()), default=0.0),
                    "passed": all(s["passed"] for s in statements.values())}
    n_latent = factors.p_w_given_u.shape[1]
    n_w = factors.p_w_given_u.shape[0]
    observed = observe(law, info.latent)

    bridge_levels, kp1_levels, relaxed_levels, kruskal_levels, overlap_levels = {}, {}, {}, {}, {}
    for level in factors.levels:
        p_w = factors.p_w_given_u
        p_z = factors.p_z_given_ua[level]
        p_y = factors.p_y_given_ua[level]
        n_z = p_z.shape[0]

        cond_w, cond_z = condition_number(p_w), condition_number(p_z)
        row_margin = distinct_row_margin(p_y)
        distinct = row_margin > tol.eigen_gap
        square = n_w == n_z == n_latent
        kp1_levels[level] = {
            "square": square, "condition_w": cond_w, "condition_z": cond_z,
            "distinct_row_margin": row_margin,
            "passed": square and cond_w <= tol.max_condition and cond_z <= tol.max_condition and distinct,
        }

        rank_w = numerical_rank(linalg.svdvals(p_w), tol.rank)
        rank_z = numerical_rank(linalg.svdvals(p_z), tol.rank)
        relaxed_levels[level] = {
            "rank_w": rank_w, "rank_z": rank_z, "distinct_row_margin": row_margin,
            "passed": rank_w == n_latent and rank_z == n_latent and distinct,
        }

        certificate = check_kruskal(CpFactors(p_w, p_z, p_y), tol.rank)
        kruskal_levels[level] = {**certificate.to_dict(), "passed": certificate.holds}

        if info.has_bridge:
            completeness = check_completeness_discrete(law, level, roles, factors.latent, tol)
            fit = solve_bridge(observed, level, roles, tol)
            bridge_ok = completeness.complete and fit.solvable
            bridge_levels[level] = {
                "complete": completeness.complete, "completeness_rank": completeness.rank,
                "singular_values": completeness.singular_values, "residual": fit.residual,
                "solvable": fit.solvable, "passed": bridge_ok,
            }
            overlap_levels[level] = {
                "k_b_full": certificate.k_b == n_latent,
                "bridge": bridge_ok,
                "k_a_plus_k_c": certificate.k_a + certificate.k_c,
                "passed": (certificate.k_b == n_latent and bridge_ok
                           and n_latent + 2 <= certificate.k_a + certificate.k_c),
            }

    sets = {
        "kp_set1": _per_level(kp1_levels, prerequisites_ok, array_markov),
        "kp_relaxed": _per_level(relaxed_levels, prerequisites_ok, array_markov),
        "kruskal_set2": _per_level(kruskal_levels, prerequisites_ok, array_markov),
    }
    if info.has_bridge:
        sets["bridge_set"] = _per_level(bridge_levels, prerequisites_ok)
        sets["overlap_set2"] = _per_level(overlap_levels, prerequisites_ok, array_markov)
    else:
        sets["bridge_set"] = _not_applicable(f"no outcome bridge for {info.structure.value}")
        sets["overlap_set2"] = _not_applicable(f"no outcome bridge for {info.structure.value}")
    return sets


@track_operation("audit")
def audit(law: FullLaw, structure: "str | Structure", tol: Tolerances = DEFAULT_TOLERANCES) -> AssumptionReport:
    """Evaluate every assumption set against a latent-visible law. Never raises for failed checks."""
    info = structure_info(structure)
    for name in info.variables:
        law.axis(name)

    cache_key = get_cache_key("audit", fingerprint=law.fingerprint(), structure=info.structure.value,
                              tol=sorted(tol.to_dict().items()))
    cached = get_from_cache(cache_key)
    if cached is not None:
        logger.debug(f"Cache hit for audit of {info.structure.value}")
        return cached

    markov = _markov(law, info.markov, tol)
    positivity = _positivity(law, info)
    prerequisites_ok = positivity["passed"] and all(m["passed"] for m in markov.values())

    if info.roles is None:
        reason = f"{info.structure.value} has no proxy roles"
        sets = {name: _not_applicable(reason)
                for name in ("bridge_set", "kp_set1", "kp_relaxed", "kruskal_set2", "overlap_set2")}
    elif not positivity["passed"]:
        sets = {name: {"applicable": True, "passed": False, "reason": "positivity violated"}
                for name in ("bridge_set", "kp_set1", "kp_relaxed", "kruskal_set2", "overlap_set2")}
    else:
        sets = _factor_sets(law, info, true_factors(law, info), prerequisites_ok, tol)

    report = AssumptionReport(structure=info.structure.value, markov=markov, positivity=positivity,
                              tolerances=tol.to_dict(), **sets)
    track_audit(info.structure.value, classify(report).value)
    set_in_cache(cache_key, report)
    return report


def classify(report: AssumptionReport) -> Table1Cell:
    bridge_ok = report.bridge_set["passed"]
    kruskal_ok = report.kruskal_set2["passed"]
    if bridge_ok and kruskal_ok:
        return Table1Cell.BOTH
    if bridge_ok:
        return Table1Cell.BRIDGE_ONLY
    if kruskal_ok:
        return Table1Cell.KRUSKAL_ONLY
    return Table1Cell.NEITHER


def report_rows(report: AssumptionReport) -> List[Dict[str, Any]]:
    """Flatten an audit into rows of (section, condition, level, passed, value) for CSV output"""
    rows = []
    for name, entry in report.markov.items():
        rows.append({"section": "markov", "condition": name, "level": "", "passed": entry["passed"],
                     "value": entry["deviation"]})
    rows.append({"section": "positivity", "condition": "min stratum mass", "level": "",
                 "passed": report.positivity["passed"], "value": report.positivity["min_mass"]})

    measures = {
        "bridge_set": [("completeness rank", "completeness_rank"), ("bridge residual", "residual")],
        "kp_set1": [("condition P(W|U)", "condition_w"), ("condition P(Z|U,a)", "condition_z"),
                    ("distinct rows of P(Y|U,a)", "distinct_row_margin")],
        "kp_relaxed": [("rank P(W|U)", "rank_w"), ("rank P(Z|U,a)", "rank_z")],
        "kruskal_set2": [("kruskal margin", "margin")],
        "overlap_set2": [("k_A + k_C", "k_a_plus_k_c")],
    }
    for section, conditions in measures.items():
        entry = getattr(report, section)
        if not entry.get("levels"):
            rows.append({"section": section, "condition": entry.get("reason", ""), "level": "",
                         "passed": entry["passed"], "value": None})
            continue
        if "markov" in entry:
            rows.append({"section": section, "condition": "array Markov deviation", "level": "",
                         "passed": entry["markov"]["passed"], "value": entry["markov"]["deviation"]})
        for level, details in entry["levels"].items():
            for label, key in conditions:
                rows.append({"section": section, "condition": label, "level": level,
                             "passed": details["passed"], "value": details[key]})
    return rows


# ---------------------------------------------------------------------------
# Non-nestedness search
# ---------------------------------------------------------------------------

def _fig3(u: int, z: int, w: int, y: int, **options) -> Dict[str, Any]:
    return {"structure": Structure.FIG3_KP.value,
            "cardinalities": {"U": u, "Z": z, "W": w, "A": 2, "Y": y}, **options}


# Grid entries chosen so every cell is reachable: square binary lands in BOTH, |Z| < |U| with enough
# W and Y categories in KRUSKAL_ONLY, collinear outcome columns in BRIDGE_ONLY, too few
# categories in NEITHER.
DEFAULT_GRID: List[Dict[str, Any]] = [
    _fig3(2, 2, 2, 2),
    _fig3(3, 2, 3, 3),
    _fig3(2, 2, 2, 2, shared_outcome_columns=True),
    _fig3(3, 2, 2, 2),
    _fig3(3, 3, 2, 3),
    _fig3(3, 3, 3, 3),
    _fig3(2, 3, 3, 2, shared_outcome_columns=True),
]


@dataclass
class SearchResult:
    seed: int
    budget: int
    evaluated: int
    witnesses: Dict[str, List[Dict[str, Any]]]
    failures: List[Dict[str, Any]]

    @property
    def empty_cells(self) -> List[str]:
        return [cell for cell, found in self.witnesses.items() if not found]

    def to_dict(self) -> Dict[str, Any]:
        return {"seed": self.seed, "budget": self.budget, "evaluated": self.evaluated,
                "empty_cells": self.empty_cells, "witnesses": self.witnesses, "failures": self.failures}

    def rows(self) -> List[Dict[str, Any]]:
        rows = []
        for cell, found in self.witnesses.items():
            for witness in found:
                spec = witness["spec"]
                cards = ",".join(f"{k}={v}" for k, v in spec["cardinalities"].items())
                rows.append({"cell": cell, "index": witness["index"], "structure": spec["structure"],
                             "cardinalities": cards, "seed": spec["seed"],
                             "shared_outcome_columns": spec["shared_outcome_columns"],
                             "bridge_passed": witness["audit"]["bridge_set"]["passed"],
                             "kruskal_passed": witness["audit"]["kruskal_set2"]["passed"]})
        return rows


def candidate_seed(seed: int, index: int) -> int:
    """Independent 64-bit model seed for candidate `index` of a search"""
    state = np.random.SeedSequence(entropy=seed, spawn_key=(index,)).generate_state(1, dtype=np.uint64)
    return int(state[0])


def _evaluate_candidate(index: int, template: Dict[str, Any], seed: int, tol: Tolerances) -> Dict[str, Any]:
    spec = ModelSpec.from_dict({**template, "seed": candidate_seed(seed, index)})
    law = generate(spec, tol)
    report = audit(law, spec.structure, tol)
    track_search_candidate()
    return {"index": index, "cell": classify(report).value, "spec": spec.to_dict(),
            "model": law_to_dict(law), "audit": report.to_dict()}


@track_operation("search_nonnested")
def search_nonnested(budget: int, seed: int, grid: Optional[Sequence[Dict[str, Any]]] = None,
                     jobs: int = THREAD_POOL_WORKERS, tol: Tolerances = DEFAULT_TOLERANCES,
                     witnesses_per_cell: int = 1) -> SearchResult:
    """Generate and audit candidate models until every comparison cell has a witness.

    Candidate i uses grid entry grid[i % len(grid)] and a seed derived from (seed, i),
    so witnesses are the same for any number of workers.
    """
    grid = list(grid or DEFAULT_GRID)
    witnesses: Dict[str, List[Dict[str, Any]]] = {cell.value: [] for cell in Table1Cell}
    failures: List[Dict[str, Any]] = []
    evaluated = 0

    def filled() -> bool:
        return all(len(found) >= witnesses_per_cell for found in witnesses.values())

    logger.info(f"Searching up to {budget} candidates over {len(grid)} grid entries with {jobs} workers")
    with ThreadPoolExecutor(max_workers=max(1, jobs), thread_name_prefix="proxident-worker") as pool:
        for start in range(0, budget, SEARCH_BATCH_SIZE):
            indices = range(start, min(start + SEARCH_BATCH_SIZE, budget))
            futures = [pool.submit(_evaluate_candidate, i, grid[i % len(grid)], seed, tol) for i in indices]

            # Merge in candidate order
            for i, future in zip(indices, futures):
                if filled():
                    break
                evaluated += 1
                try:
                    result = future.result()
                except ProxidentError as e:
                    logger.error(f"Candidate {i} failed: {e}")
                    failures.append({"index": i, **e.to_dict()})
                    continue
                found = witnesses[result["cell"]]
                if len(found) < witnesses_per_cell:
                    found.append(result)
                    logger.info(f"Candidate {i} is a {result['cell']} witness")
            if filled():
                break

    result = SearchResult(seed=seed, budget=budget, evaluated=evaluated, witnesses=witnesses, failures=failures)
    for cell in result.empty_cells:
        logger.warning(f"No {cell} witness found within budget {budget}")
    return result


def verify_witness(witness: Dict[str, Any], tol: Tolerances = DEFAULT_TOLERANCES) -> bool:
    """Regenerate a witness from its spec and check it lands in the same cell"""
    spec = ModelSpec.from_dict(witness["spec"])
    return classify(audit(generate(spec, tol), spec.structure, tol)).value == witness["cell"]


# ---------------------------------------------------------------------------
# End-to-end comparison
# ---------------------------------------------------------------------------

@dataclass
class ComparisonReport:
    structure: str
    cell: Optional[str]
    audit: AssumptionReport
    oracle: Optional[CounterfactualLaw]
    identifiers: Dict[str, Dict[str, Any]]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "structure": self.structure,
            "cell": self.cell,
            "audit": self.audit.to_dict(),
            "oracle": self.oracle.to_dict() if self.oracle else None,
            "identifiers": self.identifiers,
        }


def latent_recovery_error(recovery: LatentRecovery, truth: LatentFactors) -> Optional[float]:
    """Max entrywise error of the recovered factors, up to the best latent relabelling"""
    if recovery.latent_cardinality != truth.p_w_given_u.shape[1]:
        return None
    perm, _ = align_columns(truth.p_w_given_u, recovery.p_w_given_u.entries)
    errors = [np.abs(recovery.p_w_given_u.entries[:, perm] - truth.p_w_given_u).max(),
              np.abs(recovery.f_u[perm] - truth.f_u).max()]
    for level in truth.levels:
        errors.append(np.abs(recovery.p_z_given_ua[level].entries[:, perm] - truth.p_z_given_ua[level]).max())
        errors.append(np.abs(recovery.p_y_given_ua[level].entries[:, perm] - truth.p_y_given_ua[level]).max())
    return float(max(errors))


def _run_identifier(name: str, eligible: bool, run: Callable[[], Any], oracle: Optional[CounterfactualLaw],
                    truth: Optional[LatentFactors]) -> Dict[str, Any]:
    entry: Dict[str, Any] = {"eligible": eligible, "status": "skipped", "max_deviation": None,
                             "latent_error": None, "error": None}
    if not eligible:
        return entry
    try:
        outcome = run()
    except ProxidentError as e:
        logger.error(f"Identifier {name} failed: {e}")
        entry.update(status="failed", error=e.to_dict())
        return entry

    counterfactual = outcome if isinstance(outcome, CounterfactualLaw) else outcome.counterfactual
    if oracle is not None and counterfactual is not None:
        entry["max_deviation"] = max_deviation(counterfactual, oracle)
        entry["counterfactual"] = counterfactual.to_dict()
    recovery = getattr(outcome, "recovery", None)
    if recovery is not None and truth is not None:
        entry["latent_error"] = latent_recovery_error(recovery, truth)
    entry["status"] = "ok"
    return entry


@track_operation("run_comparison")
def run_comparison(law: FullLaw, structure: "str | Structure", tol: Tolerances = DEFAULT_TOLERANCES,
                   restarts: Optional[int] = None, seed: int = 0) -> ComparisonReport:
    """Audit a latent-visible law, then run every identifier whose assumptions hold
    on its observed margin and compare with the oracle."""
    info = structure_info(structure)
    report = audit(law, info.structure, tol)
    observed = observe(law, info.latent)

    oracle = None
    if info.confounders:
        try:
            oracle = adjust(law, info.confounders, info.treatment, info.outcome)
        except ProxidentError as e:
            logger.error(f"Oracle failed for {info.structure.value}: {e}")

    truth = None
    if info.roles is not None and report.positivity["passed"]:
        truth = true_factors(law, info)

    array_options = {"seed": seed}
    if restarts is not None:
        array_options["restarts"] = restarts

    identifiers: Dict[str, Dict[str, Any]] = {}
    if info.structure == Structure.FIG1_OBSERVED_CONFOUNDER:
        identifiers["adjustment"] = _run_identifier(
            "adjustment", report.positivity["passed"],
            lambda: adjust(observed, info.confounders, info.treatment, info.outcome), oracle, None)
    elif info.structure == Structure.FIGA1_FRONTDOOR:
        identifiers["frontdoor"] = _run_identifier(
            "frontdoor", report.markov_ok and report.positivity["passed"],
            lambda: frontdoor(observed, info.mediator, info.treatment, info.outcome), oracle, None)
    elif info.structure == Structure.FIGA3_MEDIATOR_PROXIES:
        identifiers["mediator_array"] = _run_identifier(
            "mediator_array", report.kp_set1["passed"],
            lambda: identify_mediator_array(observed, info.roles, tol, seed, info.mediator), oracle, truth)
    else:
        roles = info.roles
        if info.has_bridge:
            identifiers["bridge"] = _run_identifier(
                "bridge", report.bridge_set["passed"],
                lambda: identify_bridge(observed, roles, tol), oracle, None)
        identifiers["eigen"] = _run_identifier(
            "eigen", report.kp_set1["passed"],
            lambda: identify_array(observed, "eigen", roles, tol, seed=seed), oracle, truth)
        rank = law.cardinality(info.proxy_latent)
        identifiers["cp"] = _run_identifier(
            "cp", report.kruskal_set2["passed"],
            lambda: identify_array(observed, "cp", roles, tol, rank=rank, **array_options), oracle, truth)

    cell = classify(report).value if info.roles is not None else None
    logger.info(f"Compared {info.structure.value} model: cell {cell}, "
                f"{sum(e['status'] == 'ok' for e in identifiers.values())} identifier(s) ran")
    return ComparisonReport(structure=info.structure.value, cell=cell, audit=report, oracle=oracle,
                            identifiers=identifiers)


@dataclass
class SemComparison:
    sem: GaussianSem
    draws: int
    seed: int
    levels: Dict[str, Dict[str, float]]
    ace: float
    observational_slope: float

    def to_dict(self) -> Dict[str, Any]:
        return {"sem": self.sem.to_dict(), "draws": self.draws, "seed": self.seed, "levels": self.levels,
                "ace": self.ace, "observational_slope": self.observational_slope}


@track_operation("run_sem_comparison")
def run_sem_comparison(sem: GaussianSem, levels: Sequence[float] = (0.0, 1.0), n: int = 1_000_000,
                       seed: int = 0) -> SemComparison:
    """Closed-form E[Y(a)] against interventional Monte Carlo, per treatment value"""
    results = {}
    for offset, a in enumerate(levels):
        y = sem_simulate(sem, n, seed + offset, intervention=a)[:, 4]
        exact = sem_counterfactual_mean(sem, a)
        mean = float(y.mean())
        standard_error = float(y.std(ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
        z = (mean - exact) / standard_error if standard_error > 0 else 0.0
        results[repr(float(a))] = {"a": float(a), "closed_form": exact, "monte_carlo": mean,
                                   "standard_error": standard_error, "z_score": z,
                                   "within_3se": abs(z) <= 3.0}
    return SemComparison(sem=sem, draws=n, seed=seed, levels=results, ace=sem.alpha_ay,
                         observational_slope=sem_observational_slope(sem))
