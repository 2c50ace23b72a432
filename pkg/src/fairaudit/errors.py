"""Exception hierarchy shared across the auditing toolkit."""


class AuditError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(AuditError):
    """Invalid or inconsistent configuration."""


# ---------------------------------------------------------------------------
# pool ingestion


class ParseError(AuditError):
    def __init__(self, line: int, detail: str):
        super().__init__(f"line {line}: {detail}")
        self.line = line
        self.detail = detail


class DuplicateId(AuditError):
    def __init__(self, example_id: str):
        super().__init__(f"duplicate example id {example_id!r}")
        self.example_id = example_id


class InconsistentDimension(AuditError):
    def __init__(self, row: int, expected: int, got: int):
        super().__init__(f"row {row}: expected {expected} features, got {got}")
        self.row = row
        self.expected = expected
        self.got = got


class NonBinaryField(AuditError):
    def __init__(self, row: int, field: str, value: str):
        super().__init__(f"row {row}: field {field!r} must be 0 or 1, got {value!r}")
        self.row = row
        self.field = field
        self.value = value


class EmptyPool(AuditError):
    pass


class PoolExhausted(AuditError):
    pass


# ---------------------------------------------------------------------------
# scoring


class DimensionMismatch(AuditError):
    pass


class InvalidProbability(AuditError):
    pass


class MissingScore(AuditError):
    def __init__(self, example_id: str):
        super().__init__(f"no score for example id {example_id!r}")
        self.example_id = example_id


class RemoteProtocolError(AuditError):
    pass


class RemoteTimeout(AuditError):
    pass


# ---------------------------------------------------------------------------
# metrics / optimisation


class DegenerateGroup(AuditError):
    def __init__(self, group: int, detail: str = "needs at least one positive and one negative"):
        super().__init__(f"group {group}: {detail}")
        self.group = group


class CurveTooShort(AuditError):
    pass


class InvertedInterval(AuditError):
    pass


class InvalidRange(AuditError):
    pass


class InvalidArchitecture(AuditError):
    pass


class NonDifferentiableObjective(AuditError):
    pass


class SingularKernel(AuditError):
    pass


class UnfittedGP(AuditError):
    pass


class InfeasibleCalibration(AuditError):
    pass
