"""Exception types shared across the engine."""


class TidyloopError(Exception):
    """Base class for all engine errors."""


# --- scene graph ---

class SceneGraphError(TidyloopError):
    pass


class CycleDetected(SceneGraphError):
    """Support edges (on/in) contain a cycle."""


class NodeUniverseMismatch(SceneGraphError):
    """Two graphs being diffed do not share the same node id set."""


# --- objectives ---

class UnplacedNode(TidyloopError):
    def __init__(self, node_id: str):
        super().__init__(f"node {node_id!r} has no pose")
        self.node_id = node_id


class EmptySupportSet(TidyloopError):
    """No movable object is supported by the named base."""


# --- pose synthesis ---

class RegionTooSmall(TidyloopError):
    """A member footprint cannot fit inside the placement region."""


# --- backends ---

class BackendError(TidyloopError):
    pass


class BackendTimeout(BackendError):
    pass


class HttpError(BackendError):
    def __init__(self, status_code: int, detail: str = ""):
        super().__init__(f"backend returned HTTP {status_code}: {detail}")
        self.status_code = status_code


class ParseError(BackendError):
    """Backend output violates the stage grammar."""

    def __init__(self, message: str, location: str = ""):
        super().__init__(f"{message} (at {location})" if location else message)
        self.location = location


class MalformedResponse(BackendError):
    """Backend kept producing unparseable output after the retry budget."""


class PromptBudgetExceeded(BackendError):
    """Assembled prompt would exceed the configured token ceiling."""


# --- planner ---

class PlanningError(TidyloopError):
    pass


class NoProgress(PlanningError):
    """Two consecutive replans failed on identical steps."""


class LoopBudgetExhausted(PlanningError):
    """The plan/synthesize/execute loop hit its iteration budget."""


# --- preferences ---

class PreferenceError(TidyloopError):
    pass


class EmptyText(PreferenceError):
    pass


class BudgetNotExceeded(PreferenceError):
    """Profiling was requested while the store is still under its token budget."""


class CompressionFailed(PreferenceError):
    """A profiling pass could not bring the store back under budget."""


class EmbedderError(PreferenceError):
    pass


# --- benchmark ---

class UnknownPreferenceTag(TidyloopError):
    def __init__(self, tag: str):
        super().__init__(f"no predicate registered for preference tag {tag!r}")
        self.tag = tag


class EmptyBatch(TidyloopError):
    """Metric normalization needs at least one peer value."""
