#!/usr/bin/env python3
"""
proxident command line

Generate synthetic proxy models, compute oracle counterfactuals, run the
bridge and array identifiers, audit identifying assumptions and search for
models that separate the two approaches. Every command writes JSON (or CSV
where offered) to --out or stdout.

Exit status: 0 on success, 1 when an identifier fails, 2 on bad input.
"""

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import jsonschema
import numpy as np

from bridge import identify_bridge
from compare import audit, classify, report_rows, run_comparison, run_sem_comparison, search_nonnested
from config import ALS_RESTARTS, DEFAULT_TOLERANCES, THREAD_POOL_WORKERS, parse_tolerance_overrides
from errors import IdentificationError, InputError, ProxidentError
from metrics import write_metrics
from models import CONSTRAINT_FLAGS, GaussianSem, ModelSpec, generate, random_sem
from oracle import ace, adjust, frontdoor
from probability import FullLaw, law_from_dict, law_to_dict
from structures import ProxyRoles, structure_info
from tensor import (
    ThreeWayArray, check_kruskal, identify_array, identify_mediator_array, k_rank, recover_cp, recover_labels,
)

logger = logging.getLogger(__name__)

SCHEMA_DIR = Path(__file__).resolve().parent.parent / "schemas"


def load_schema(name: str) -> Dict[str, Any]:
    with open(SCHEMA_DIR / f"{name}.schema.json") as f:
        return json.load(f)


def _json_path(path) -> str:
    return "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in path)


def read_json(path: str, schema: Optional[str] = None) -> Any:
    """Load a JSON input, reporting the line for syntax errors and the field path for schema errors"""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise InputError(f"Cannot read {path}: {e}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}",
                         {"line": e.lineno, "column": e.colno})
    if schema:
        try:
            jsonschema.validate(instance=data, schema=load_schema(schema))
        except jsonschema.ValidationError as e:
            where = _json_path(e.absolute_path)
            raise InputError(f"{path}: {e.message} at {where}", {"path": where})
    return data


def to_jsonable(value: Any) -> Any:
    """Plain JSON types; non-finite floats become null"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def dumps(document: Any) -> str:
    # repr-based float output round-trips every double exactly
    return json.dumps(to_jsonable(document), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
        logger.info(f"Wrote {out}")
    else:
        sys.stdout.write(text)


def csv_text(rows: List[Dict[str, Any]]) -> str:
    buffer = io.StringIO()
    if rows:
        writer = csv.DictWriter(buffer, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: to_jsonable(v) if v is not None else "" for k, v in row.items()})
    return buffer.getvalue()


def _tolerances(args) -> Any:
    return parse_tolerance_overrides(args.tol, DEFAULT_TOLERANCES) if getattr(args, "tol", None) else DEFAULT_TOLERANCES


def _load_law(path: str) -> FullLaw:
    return law_from_dict(read_json(path, "model"))


def _parse_cards(text: str) -> Dict[str, int]:
    cards = {}
    for part in text.split(","):
        name, sep, value = part.partition("=")
        if not sep:
            raise InputError(f"Cardinality '{part}' is not of the form NAME=N")
        try:
            cards[name.strip()] = int(value)
        except ValueError:
            raise InputError(f"Cardinality of '{name.strip()}' is not an integer: {value!r}")
    return cards


def _split(text: Optional[str]) -> List[str]:
    return [item.strip() for item in (text or "").split(",") if item.strip()]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> None:
    if args.spec:
        spec = ModelSpec.from_dict(read_json(args.spec, "model_spec"))
    else:
        if not args.structure or not args.cards:
            raise InputError("generate needs --spec or both --structure and --cards")
        spec = ModelSpec(
            structure=args.structure,
            cardinalities=_parse_cards(args.cards),
            seed=args.seed,
            constraints=tuple(c.replace("-", "_") for c in _split(args.constraints)),
            include_optional_edges=not args.no_optional_edges,
            shared_outcome_columns=args.shared_outcome_columns,
        )
    law = generate(spec, _tolerances(args))
    _write(dumps({**law_to_dict(law), "meta": spec.to_dict()}), args.out)


def cmd_oracle(args) -> None:
    law = _load_law(args.model)
    if args.frontdoor:
        cf = frontdoor(law, args.frontdoor, args.treatment, args.outcome)
        adjustment = {"frontdoor": args.frontdoor}
    else:
        if args.confounders is not None:
            confounders = _split(args.confounders)
        elif args.structure:
            confounders = list(structure_info(args.structure).confounders)
        else:
            raise InputError("oracle needs --structure, --confounders or --frontdoor")
        cf = adjust(law, confounders, args.treatment, args.outcome)
        adjustment = {"confounders": confounders}

    document = {"command": "oracle", "seed": None, **adjustment, "counterfactual": cf.to_dict(), "ace": None}
    if cf.treatment.cardinality == 2:
        document["ace"] = ace(cf)
    _write(dumps(document), args.out)


def _roles(args) -> ProxyRoles:
    if args.structure:
        roles = structure_info(args.structure).roles
        if roles is None:
            raise InputError(f"Structure {args.structure} has no proxy roles")
        return roles
    return ProxyRoles()


def cmd_identify(args) -> None:
    law = _load_law(args.model)
    roles = _roles(args)
    tol = _tolerances(args)
    if args.label_proxy and args.method == "bridge":
        raise InputError("Latent labels need an array method (eigen, cp or mediator)")
    if args.method == "bridge":
        result = identify_bridge(law, roles, tol)
    elif args.method == "mediator":
        result = identify_mediator_array(law, roles, tol, args.seed)
    else:
        result = identify_array(law, args.method, roles, tol, rank=args.rank, restarts=args.restarts,
                                seed=args.seed)
    if args.label_proxy:
        labels = recover_labels(result.recovery, proxy=args.label_proxy, direction=args.label_direction)
        result.recovery = result.recovery.with_labels(labels)
    _write(dumps({"command": "identify", "method": args.method, "seed": args.seed, "result": result.to_dict()}),
           args.out)


def cmd_krank(args) -> None:
    data = read_json(args.matrix, "matrix")
    matrix = np.asarray(data["matrix"] if isinstance(data, dict) else data, dtype=np.float64)
    if matrix.ndim != 2:
        raise InputError(f"{args.matrix}: expected a matrix")
    tol = args.rank_tol if args.rank_tol is not None else DEFAULT_TOLERANCES.rank
    document = {"command": "krank", "seed": None, "shape": list(matrix.shape), "tol": tol,
                "k_rank": k_rank(matrix, tol)}
    _write(dumps(document), args.out)


def cmd_cp(args) -> None:
    tensor = ThreeWayArray.from_dict(read_json(args.tensor, "tensor"))
    result = recover_cp(tensor, args.rank, restarts=args.restarts, seed=args.seed)
    document = {"command": "cp", "seed": args.seed, "rank": args.rank, "result": result.to_dict(),
                "kruskal": check_kruskal(result.factors).to_dict()}
    _write(dumps(document), args.out)


def cmd_audit(args) -> None:
    law = _load_law(args.model)
    report = audit(law, args.structure, _tolerances(args))
    if args.format == "csv":
        _write(csv_text(report_rows(report)), args.out)
    else:
        _write(dumps({"command": "audit", "seed": None, "cell": classify(report).value,
                      "report": report.to_dict()}), args.out)


def cmd_compare(args) -> None:
    law = _load_law(args.model)
    comparison = run_comparison(law, args.structure, _tolerances(args), restarts=args.restarts, seed=args.seed)
    if args.format == "csv":
        _write(csv_text(report_rows(comparison.audit)), args.out)
    else:
        _write(dumps({"command": "compare", "seed": args.seed, **comparison.to_dict()}), args.out)


def cmd_search(args) -> None:
    grid = read_json(args.grid, "grid") if args.grid else None
    result = search_nonnested(args.budget, args.seed, grid=grid, jobs=args.jobs, tol=_tolerances(args),
                              witnesses_per_cell=args.witnesses_per_cell)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cell, found in result.witnesses.items():
        for k, witness in enumerate(found):
            _write(dumps({**witness["model"], "meta": witness["spec"]}), str(out / f"{cell}_{k}.json"))
    summary = {"command": "search", **result.to_dict()}
    _write(dumps(summary), str(out / "summary.json"))
    if args.format == "csv":
        _write(csv_text(result.rows()), str(out / "summary.csv"))


def cmd_sem(args) -> None:
    if args.coefficients:
        sem = GaussianSem.from_dict(read_json(args.coefficients, "sem"))
    else:
        sem = random_sem(args.random_seed)
    levels = [float(v) for v in _split(args.levels)]
    comparison = run_sem_comparison(sem, levels, args.draws, args.seed)
    _write(dumps({"command": "sem", **comparison.to_dict()}), args.out)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxident", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True, structure=False, tol=True):
        if model:
            p.add_argument("--model", required=True, help="model JSON (domains, probabilities, dag)")
        if structure:
            p.add_argument("--structure", required=True, help="fig1, fig2, fig3, fig4, figa1 or figa3")
        if tol:
            p.add_argument("--tol", help="tolerance overrides: a number (solvability) or field=value,...")
        p.add_argument("--out", help="output file (stdout if omitted)")

    p = sub.add_parser("generate", help="generate a random model for a structure")
    p.add_argument("--spec", help="model spec JSON")
    p.add_argument("--structure")
    p.add_argument("--cards", help="cardinalities, e.g. U=2,Z=2,W=2,A=2,Y=2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--constraints", help=f"comma list of {', '.join(CONSTRAINT_FLAGS)}")
    p.add_argument("--no-optional-edges", action="store_true")
    p.add_argument("--shared-outcome-columns", action="store_true")
    common(p, model=False)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("oracle", help="ground-truth counterfactual law")
    p.add_argument("--structure")
    p.add_argument("--confounders", help="comma list of adjustment variables")
    p.add_argument("--frontdoor", metavar="MEDIATOR")
    p.add_argument("--treatment", default="A")
    p.add_argument("--outcome", default="Y")
    common(p, tol=False)
    p.set_defaults(handler=cmd_oracle)

    p = sub.add_parser("identify", help="identify the counterfactual law from the observed margin")
    p.add_argument("--method", choices=["bridge", "eigen", "cp", "mediator"], required=True)
    p.add_argument("--structure", help="take variable roles from this structure")
    p.add_argument("--rank", type=int, help="latent cardinality for cp (default max(|W|, |Z|))")
    p.add_argument("--restarts", type=int, default=ALS_RESTARTS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label-proxy", choices=["W", "Z", "Y"], help="order latent states by this proxy's mean")
    p.add_argument("--label-direction", choices=["ascending", "descending"], default="ascending")
    common(p)
    p.set_defaults(handler=cmd_identify)

    p = sub.add_parser("krank", help="Kruskal rank of a matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--rank-tol", type=float)
    common(p, model=False, tol=False)
    p.set_defaults(handler=cmd_krank)

    p = sub.add_parser("cp", help="CP decomposition of a three-way array")
    p.add_argument("--tensor", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--restarts", type=int, default=ALS_RESTARTS)
    p.add_argument("--seed", type=int, default=0)
    common(p, model=False, tol=False)
    p.set_defaults(handler=cmd_cp)

    p = sub.add_parser("audit", help="audit the identifying assumptions of a latent-visible model")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    common(p, structure=True)
    p.set_defaults(handler=cmd_audit)

    p = sub.add_parser("compare", help="run every eligible identifier against the oracle")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--restarts", type=int)
    p.add_argument("--seed", type=int, default=0)
    common(p, structure=True)
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("search", help="search for models separating the bridge and array approaches")
    p.add_argument("--budget", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=THREAD_POOL_WORKERS)
    p.add_argument("--grid", help="JSON list of model templates (structure, cardinalities, options)")
    p.add_argument("--witnesses-per-cell", type=int, default=1)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--out", required=True, help="directory for witnesses and summary")
    p.add_argument("--tol")
    p.set_defaults(handler=cmd_search)

    p = sub.add_parser("sem", help="Gaussian SEM closed form against Monte Carlo")
    p.add_argument("--coefficients", help="flat JSON coefficient map")
    p.add_argument("--random-seed", type=int, default=0, help="draw coefficients when --coefficients is omitted")
    p.add_argument("--levels", default="0,1")
    p.add_argument("--draws", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_sem)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the proxident command line"""
    args = build_parser().parse_args(argv)
    try:
        args.handler(args)
        return 0
    except IdentificationError as e:
        logger.error(f"Identification failed: {e}")
        sys.stderr.write(dumps(e.to_dict()))
        return 1
    except (ProxidentError, ValueError) as e:
        logger.error(f"Invalid input: {e}")
        sys.stderr.write(dumps(e.to_dict() if isinstance(e, ProxidentError)
                               else {"error": type(e).__name__, "message": str(e), "details": {}}))
        return 2
    finally:
        write_metrics()


if __name__ == "__main__":
    sys.exit(main())
