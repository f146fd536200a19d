"""Exception types shared across the multitap pipeline."""


class MultitapError(Exception):
    """Base class for all multitap-specific failures."""


class ParseError(MultitapError):
    """A data file line could not be parsed or violates a field constraint."""

    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class UnknownItemError(ParseError):
    """Interaction references an item with no metadata entry."""


class DuplicateInteractionError(ParseError):
    """Exact (user, item, timestamp) triple appears twice in one domain."""


class EmptyOverlapError(MultitapError):
    """Source and target domains share no users."""


class DegenerateSplitError(MultitapError):
    """Time split produced an empty train or test set."""


class MissingLabelError(MultitapError):
    """A persona criterion has no label map for a required category."""


class ClientError(MultitapError):
    """Remote generation or embedding call failed after retries."""


class MalformedResponseError(ClientError):
    """Client response did not match the expected structured output."""


class DivergenceError(MultitapError):
    """Training produced a non-finite loss."""


class DependencyError(MultitapError):
    """A pipeline stage was requested before its inputs exist."""

    def __init__(self, stage: str, needed: str):
        super().__init__(
            f"stage '{stage}' is missing artifacts from stage '{needed}'; run '{needed}' first"
        )
        self.stage = stage
        self.needed = needed
