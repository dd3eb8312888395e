from typing import Any, Dict, Optional


class ProxidentError(Exception):
    """Base error carrying structured details for reports"""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {"error": type(self).__name__, "message": str(self), "details": self.details}


class DomainError(ProxidentError, ValueError):
    """Unknown variable, bad cardinality or a request outside an operation's domain"""


class ConditioningError(ProxidentError):
    """Conditioning on an event with zero probability"""


class GenerationError(ProxidentError):
    """Model generator could not satisfy the requested constraints"""


class InputError(ProxidentError):
    """Malformed model, tensor or matrix input"""


class IdentificationError(ProxidentError):
    """An identifier could not recover the target from the observed law"""


class NonIdentifiabilityError(IdentificationError):
    """Eigenvalues are not separated enough to determine latent components"""


class NumericalFailureError(IdentificationError):
    """Numerics disagree with the structural guarantees (e.g. complex spectrum)"""


class RecoveryFailureError(IdentificationError):
    """Recovered conditionals are not probability vectors"""


class ConvergenceError(IdentificationError):
    """Alternating least squares did not converge on any restart"""


class LabelAmbiguityError(ProxidentError):
    """Proxy functional values do not separate the latent states"""
