"""Exception hierarchy shared across the pipeline stages."""


class RefMeshError(Exception):
    """Base class for all library errors."""


class ParseError(RefMeshError):
    pass


class UnsupportedFeature(RefMeshError):
    pass


class MeshIOError(RefMeshError, OSError):
    pass


class EmptyMesh(RefMeshError):
    pass


class NotWatertight(RefMeshError):
    def __init__(self, message, boundary_edge_count=None, frame=None):
        super().__init__(message)
        self.boundary_edge_count = boundary_edge_count
        self.frame = frame


class DegenerateExtent(RefMeshError):
    pass


class GridMismatch(RefMeshError):
    pass


class TooManyCenters(RefMeshError):
    pass


class EmptyVolume(RefMeshError):
    def __init__(self, message, frame=None):
        super().__init__(message)
        self.frame = frame


class EmptyRange(RefMeshError):
    pass


class DegenerateConfiguration(RefMeshError):
    pass


class SingularSystem(RefMeshError):
    pass


class OptimizationDiverged(RefMeshError):
    pass


class ZeroNormal(RefMeshError):
    pass


class EmptyField(RefMeshError):
    pass


class SolverSingular(RefMeshError):
    pass


class InsufficientMatches(RefMeshError):
    def __init__(self, message, n_matches=0):
        super().__init__(message)
        self.n_matches = n_matches


class ConfigError(RefMeshError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class StageError(RefMeshError):
    """Wraps a failure with the pipeline stage and frame/group context."""

    def __init__(self, stage, cause, group=None, frame=None):
        ctx = [f"stage={stage}"]
        if group is not None:
            ctx.append(f"group={group}")
        if frame is not None:
            ctx.append(f"frame={frame}")
        super().__init__(f"[{' '.join(ctx)}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.group = group
        self.frame = frame
