"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition of a public operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class ParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateMeshError(ValueError):
    pass


class FitError(ValueError):
    pass


class FormatError(ValueError):
    """Checkpoint bytes could not be decoded."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class UnsupportedVersionError(FormatError):
    pass
