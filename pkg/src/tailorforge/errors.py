"""Exception hierarchy shared by every stage of the toolchain."""


class TailorError(Exception):
    """Base class for all tailorforge errors."""


class GraphParseError(TailorError):
    """The graph document is not well-formed."""


class GraphValidationError(TailorError):
    """A parsed graph violates a structural invariant."""

    def __init__(self, reason, node_id=None, edge_id=None):
        self.reason = reason
        self.node_id = node_id
        self.edge_id = edge_id
        where = []
        if node_id is not None:
            where.append(f"node {node_id!r}")
        if edge_id is not None:
            where.append(f"edge {edge_id!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + reason)


class ShapeError(TailorError):
    """A deduction rule cannot produce output shapes for its inputs."""


class ConfigError(TailorError):
    """The modification-space config is malformed or invalid."""


class CompileError(TailorError):
    """Compilation cannot satisfy the graph/config combination."""


class TransformError(TailorError):
    """A modification cannot be applied to the addressed module."""


class LegalityError(TailorError):
    """Active architecture is inconsistent after a modification."""

    def __init__(self, message, paths=()):
        self.paths = tuple(paths)
        super().__init__(message)


class NotUpdatedError(TailorError):
    """build() was called on a tree with pending transforms."""


class SpecError(TailorError):
    """A SubNet spec does not fit its modification space."""


class MissingKeyError(TailorError):
    """A latency/energy lookup hit a key absent from the LUT."""

    def __init__(self, key):
        self.key = key
        super().__init__(f"operator key missing from LUT: {key}")


class PartialLUTError(TailorError):
    """The cost backend could not measure every manifest key."""

    def __init__(self, missing):
        self.missing = list(missing)
        listing = "\n  ".join(str(k) for k in self.missing)
        super().__init__(f"{len(self.missing)} key(s) could not be measured:\n  {listing}")


class OracleError(TailorError):
    """The accuracy oracle failed to score a spec."""


class InfeasibleBudgetError(TailorError):
    """No SubNet meeting the latency budget could be found."""

    def __init__(self, budget_ms, min_latency_ms):
        self.budget_ms = budget_ms
        self.min_latency_ms = min_latency_ms
        super().__init__(
            f"no feasible SubNet for budget {budget_ms:g} ms "
            f"(lowest latency seen: {min_latency_ms:g} ms)"
        )


class ArtifactError(TailorError):
    """An artifact file is missing, malformed, or of the wrong format version."""
