"""Exception hierarchy shared across the workbench."""


class ExposimError(Exception):
    """Base class for all workbench errors."""


class MeshError(ExposimError):
    """Invalid mesh topology or geometry."""


class MeshParseError(MeshError):
    """Mesh file does not follow the documented format."""


class DegenerateTetError(MeshError):
    """A tetrahedron has non-positive rest volume."""


class NonManifoldSurfaceError(MeshError):
    """Boundary face extraction found a face shared by more than two tets."""


class BindError(ExposimError):
    """A point could not be bound to the surface within tolerance."""


class ConstraintError(ExposimError):
    """Constraint set references invalid vertices or is inconsistent."""


class CouplingError(ExposimError):
    """Face coupling request is invalid (off-surface face, already coupled)."""


class SolverDivergence(ExposimError):
    """The quasi-static solve produced a non-finite state."""

    def __init__(self, sweep: int, detail: str = ""):
        self.sweep = sweep
        super().__init__(f"solver diverged at sweep {sweep}{': ' + detail if detail else ''}")


class FeatureConstructionError(ExposimError):
    """Ring-surface intersection failed for a (radius, k) combination."""

    def __init__(self, radius: float, k: float, detail: str):
        self.radius = radius
        self.k = k
        super().__init__(f"feature construction failed at (r={radius}, k={k}): {detail}")


class DegenerateFeatureError(ExposimError):
    """A feature vector collapsed onto the ring center."""


class PerceptionError(ExposimError):
    """Synthetic sensing failed (e.g. no visible surface)."""


class SelectionError(ExposimError):
    """Assistance-position selection has no feasible candidate."""


class ScenarioError(ExposimError):
    """Scenario file is invalid or references unresolvable entities."""


class ProtocolError(ExposimError):
    """Session message violates the protocol schema or ordering contract."""
