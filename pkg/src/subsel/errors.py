"""Exception hierarchy shared by every subsel module."""


class SubselError(Exception):
    """Base class for all library errors."""


class ParseError(SubselError, ValueError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class NodeRangeError(SubselError, IndexError):
    pass


class ShapeError(SubselError, ValueError):
    pass


class InsufficientDataError(SubselError, ValueError):
    pass


class SamplingError(SubselError, RuntimeError):
    pass


class DomainError(SubselError, ValueError):
    pass


class NumericError(SubselError, FloatingPointError):
    pass


class ContractError(SubselError, ValueError):
    pass


class ConfigError(SubselError, ValueError):
    pass


class EmptyInputError(SubselError, ValueError):
    pass


class CoverageError(SubselError, KeyError):
    def __init__(self, edge):
        super().__init__(f"selection table has no entry for edge {edge[0]}-{edge[1]}")
        self.edge = edge

    def __str__(self):
        return self.args[0]


class DivergenceError(SubselError, FloatingPointError):
    def __init__(self, epoch, batch, detail=""):
        msg = f"non-finite loss at epoch {epoch}, batch {batch}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.epoch = epoch
        self.batch = batch
