"""Exception types raised by the forensics pipeline."""


class InvalidInputError(ValueError):
    """Input violates an operation's preconditions (dims, ranges, ids)."""


class DegenerateTemplateError(RuntimeError):
    """A cluster's mean spectrum binarized to an empty mask; no pattern
    template can be extracted and the caller must treat it as null-like."""


class IncompatibleDatabaseError(RuntimeError):
    """Two databases disagree on the procedure ordering and cannot be
    compared without realignment."""
