import os
import logging
from dataclasses import dataclass, fields, replace
from typing import Dict

# Configure logging to stderr so it doesn't interfere with JSON written to stdout
LOG_LEVEL = os.environ.get("PROXIDENT_LOG_LEVEL", "INFO").upper()
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[logging.StreamHandler()]
)


@dataclass(frozen=True)
class Tolerances:
    """Numerical slack used by every checker and identifier"""
    ci: float = 1e-10
    normalization: float = 1e-12
    rank: float = 1e-9
    solvability: float = 1e-8
    eigen_gap: float = 1e-6
    imaginary: float = 1e-8
    negative_probability: float = 1e-7
    clip: float = 1e-9
    renormalize_drift: float = 1e-9
    max_condition: float = 1e6
    label: float = 1e-6
    cp_fit: float = 1e-6

    def to_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def parse_tolerance_overrides(raw: str, base: Tolerances = Tolerances()) -> Tolerances:
    """Apply a PROXIDENT_TOL style override string to a tolerance record.

    Accepts either a bare number (overrides `solvability`) or a comma-separated
    list of `field=value` pairs.
    """
    raw = (raw or "").strip()
    if not raw:
        return base

    known = {f.name for f in fields(Tolerances)}
    if "=" not in raw:
        return replace(base, solvability=float(raw))

    overrides = {}
    for part in raw.split(","):
        if not part.strip():
            continue
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in known:
            raise ValueError(f"Unknown tolerance field '{key}' in PROXIDENT_TOL")
        overrides[key] = float(value)
    return replace(base, **overrides)


DEFAULT_TOLERANCES = parse_tolerance_overrides(os.environ.get("PROXIDENT_TOL", ""))

# Alternating least squares schedule
ALS_MAX_ITERATIONS = int(os.environ.get("PROXIDENT_ALS_MAX_ITERATIONS", "2000"))
ALS_TOLERANCE = float(os.environ.get("PROXIDENT_ALS_TOLERANCE", "1e-10"))
ALS_RESTARTS = int(os.environ.get("PROXIDENT_ALS_RESTARTS", "10"))

# Eigen recovery
SLICE_RETRIES = int(os.environ.get("PROXIDENT_SLICE_RETRIES", "5"))
EXHAUSTIVE_ALIGNMENT_MAX = int(os.environ.get("PROXIDENT_EXHAUSTIVE_ALIGNMENT_MAX", "8"))

# Model generation
GENERATOR_MAX_RETRIES = int(os.environ.get("PROXIDENT_GENERATOR_MAX_RETRIES", "10000"))
GENERATOR_MAX_CONDITION = float(os.environ.get("PROXIDENT_GENERATOR_MAX_CONDITION", "1e3"))
GENERATOR_MIN_GAP = float(os.environ.get("PROXIDENT_GENERATOR_MIN_GAP", "1e-2"))
GENERATOR_MIN_LATENT_MASS = float(os.environ.get("PROXIDENT_GENERATOR_MIN_LATENT_MASS", "1e-3"))

# Performance configuration
THREAD_POOL_WORKERS = int(os.environ.get("PROXIDENT_THREAD_POOL_WORKERS", "4"))
ENABLE_CACHING = os.environ.get("PROXIDENT_ENABLE_CACHING", "true").lower() == "true"
CACHE_MAX_SIZE = int(os.environ.get("PROXIDENT_CACHE_MAX_SIZE", "1000"))

# Prometheus metrics configuration
ENABLE_METRICS = os.environ.get("PROXIDENT_ENABLE_METRICS", "false").lower() == "true"
METRICS_FILE = os.environ.get("PROXIDENT_METRICS_FILE")

# Check if Prometheus is available
try:
    # These imports are used in metrics.py
    from prometheus_client import Counter, Histogram, CollectorRegistry, write_to_textfile  # noqa: F401
    PROMETHEUS_AVAILABLE = True
except ImportError:
    PROMETHEUS_AVAILABLE = False
