import time
import logging
from functools import wraps
from typing import Callable, Any, Optional

from config import ENABLE_METRICS, METRICS_FILE, PROMETHEUS_AVAILABLE

logger = logging.getLogger(__name__)

# Initialize Prometheus metrics if enabled
if ENABLE_METRICS and PROMETHEUS_AVAILABLE:
    from prometheus_client import Counter, Histogram, CollectorRegistry, write_to_textfile

    registry = CollectorRegistry()

    operations_total = Counter(
        'proxident_operations_total',
        'Total number of identification and recovery operations',
        ['operation', 'status'],
        registry=registry
    )

    operation_duration_seconds = Histogram(
        'proxident_operation_duration_seconds',
        'Duration of identification and recovery operations in seconds',
        ['operation'],
        registry=registry
    )

    audits_total = Counter(
        'proxident_audits_total',
        'Total number of assumption audits by structure and comparison cell',
        ['structure', 'cell'],
        registry=registry
    )

    search_candidates_total = Counter(
        'proxident_search_candidates_total',
        'Total number of candidate models evaluated by the non-nestedness search',
        registry=registry
    )

    cache_operations_total = Counter(
        'proxident_cache_operations_total',
        'Total number of audit cache operations',
        ['operation', 'result'],
        registry=registry
    )

    logger.info("Prometheus metrics enabled")
elif ENABLE_METRICS and not PROMETHEUS_AVAILABLE:
    logger.warning("Metrics enabled but prometheus_client not available. Install with: pip install prometheus_client")
else:
    logger.debug("Prometheus metrics disabled")


def track_operation(operation: str):
    """Decorator to track operation count and duration"""
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs) -> Any:
            if ENABLE_METRICS and PROMETHEUS_AVAILABLE:
                start_time = time.time()
                try:
                    result = func(*args, **kwargs)
                    operations_total.labels(operation=operation, status='success').inc()
                    return result
                except Exception:
                    operations_total.labels(operation=operation, status='error').inc()
                    raise
                finally:
                    duration = time.time() - start_time
                    operation_duration_seconds.labels(operation=operation).observe(duration)
            else:
                return func(*args, **kwargs)
        return wrapper
    return decorator


def track_audit(structure: str, cell: str) -> None:
    """Track an assumption audit and the cell it landed in"""
    if ENABLE_METRICS and PROMETHEUS_AVAILABLE:
        audits_total.labels(structure=structure, cell=cell).inc()


def track_search_candidate() -> None:
    """Track one candidate evaluated by the model search"""
    if ENABLE_METRICS and PROMETHEUS_AVAILABLE:
        search_candidates_total.inc()


def track_cache_operation(operation: str, hit: bool) -> None:
    """Track cache operations"""
    if ENABLE_METRICS and PROMETHEUS_AVAILABLE:
        result = 'hit' if hit else 'miss'
        cache_operations_total.labels(operation=operation, result=result).inc()


def write_metrics(path: Optional[str] = None) -> bool:
    """Dump the metrics registry in the Prometheus text format.

    Returns True when a file was written.
    """
    target = path or METRICS_FILE
    if not (ENABLE_METRICS and PROMETHEUS_AVAILABLE) or not target:
        return False

    try:
        write_to_textfile(target, registry)
        logger.info(f"Metrics written to {target}")
        return True
    except Exception as e:
        logger.error(f"Failed to write metrics file: {e}")
        return False
