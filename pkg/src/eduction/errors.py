"""Domain error hierarchy shared by every tier.

Each concrete error has a stable code (its class name) that travels verbatim
in ERR reply payloads, so a client can re-raise the same class the server
raised.  Subclasses register themselves; ``error_for_code`` maps a code back
to the class, falling back to the base class for codes minted elsewhere.
"""
from __future__ import annotations

_REGISTRY: dict[str, type] = {}


class EductionError(Exception):
    """Base class for all domain errors."""

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        _REGISTRY[cls.__name__] = cls

    @property
    def code(self) -> str:
        return type(self).__name__


def error_for_code(code: str, message: str = "") -> EductionError:
    cls = _REGISTRY.get(code, EductionError)
    err = cls(message or code)
    if cls is EductionError:
        err._foreign_code = code  # keep the original code for diagnostics
    return err
