"""Exception types raised across the package."""


class ToolEvolveError(Exception):
    """Base class for all package errors."""


class MalformedRecord(ToolEvolveError):
    pass


class UnknownTool(ToolEvolveError):
    pass


class UnknownSkill(ToolEvolveError):
    pass


class FixtureInvalid(ToolEvolveError):
    pass


class BudgetExhausted(ToolEvolveError):
    pass


class GroupTooSmall(ToolEvolveError):
    pass


class TokenOutOfVocab(ToolEvolveError):
    pass


class EmptyMask(ToolEvolveError):
    pass


class LengthMismatch(ToolEvolveError):
    pass


class ShapeMismatch(ToolEvolveError):
    pass


class EmptyText(ToolEvolveError):
    pass


class UnnormalizedDistribution(ToolEvolveError):
    pass


class SummarizerFailure(ToolEvolveError):
    pass


class AdapterTimeout(ToolEvolveError):
    pass


class SchemaViolation(ToolEvolveError):
    pass


class ConfigError(ToolEvolveError):
    pass
