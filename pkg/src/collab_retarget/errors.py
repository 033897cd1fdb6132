"""Exception hierarchy shared by all modules."""


class RetargetError(Exception):
    """Base class for every error raised by this package."""


class NonWatertight(RetargetError):
    def __init__(self, open_edges):
        self.open_edges = [tuple(int(i) for i in e) for e in open_edges]
        shown = ", ".join(str(e) for e in self.open_edges[:10])
        more = "" if len(self.open_edges) <= 10 else f" (+{len(self.open_edges) - 10} more)"
        super().__init__(f"mesh is not watertight; open edges: {shown}{more}")


class DegenerateMesh(RetargetError):
    pass


class IsoOutOfRange(RetargetError):
    pass


class IncompatibleLattice(RetargetError):
    pass


class EmptyCandidate(RetargetError):
    pass


class EmptyConstraint(RetargetError):
    pass


class NonFiniteLoss(RetargetError):
    def __init__(self, iteration, value=float("nan")):
        self.iteration = iteration
        self.value = value
        super().__init__(f"loss became non-finite ({value}) at iteration {iteration}")


class TrackTooShort(RetargetError):
    pass


class LengthMismatch(RetargetError):
    pass


class ParseError(RetargetError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


class SchemaVersionMismatch(RetargetError):
    pass


class AllCandidatesRejected(RetargetError):
    pass


class ConfigError(RetargetError):
    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
