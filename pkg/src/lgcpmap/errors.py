"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: input problems exit 2,
numerical failures exit 1, cross-run consistency violations exit 3.
"""


class LgcpError(Exception):
    """Base class for all package errors."""


class InputError(LgcpError):
    """Bad user input: missing files, malformed CSV/GeoJSON, invalid config."""


class GeometryError(LgcpError):
    """Invalid geometric objects or operations (degenerate windows, points
    outside the mesh, sliver triangles)."""


class ModelError(LgcpError):
    """Model specification or usage violates a contract (e.g. requesting
    disease-specific maps from a model that has none)."""


class NumericalError(LgcpError):
    """Numerical failure: indefinite precision matrix, optimizer divergence."""


class NonConvergenceError(NumericalError):
    """Inner or outer optimization failed to converge.

    Carries the iteration trace so the failure can be diagnosed.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class ConsistencyError(LgcpError):
    """Artifacts that must refer to the same inputs do not (hash mismatch)."""
