"""Exception hierarchy shared by every edlab module.

Each error class carries the process exit code the CLI maps it to, so a
failure anywhere in the pipeline surfaces as a stable, documented status.
"""


class EdlabError(Exception):
    """Base class for all edlab errors."""

    exit_code = 1


class ParseError(EdlabError):
    """Config file is syntactically broken or contains unknown keys."""

    exit_code = 2


class ValidationError(EdlabError):
    """A structurally valid input violates a model invariant."""

    exit_code = 3


class NonIntegerQuantization(ValidationError):
    """eta_tilde / hbar is not an integer: quantized circulation fails."""


class NonPositive(ValidationError):
    """A parameter that must be strictly positive (or nonnegative) is not."""


class NotNormalized(ValidationError):
    """A density or wavefunction does not integrate to one."""


class XiZero(ValidationError):
    """Linear propagation requested with xi = 0 (use the hybrid solver)."""


class CausticDetected(EdlabError):
    """Hamilton-Jacobi characteristics crossed; hybrid evolution stopped."""

    exit_code = 4


class UnsupportedScenario(EdlabError):
    """Config names a scenario this build does not provide."""

    exit_code = 5


class NaNVelocity(EdlabError):
    """Interpolated drift became non-finite despite density flooring."""

    exit_code = 6


class MissingArtifact(EdlabError):
    """A required on-disk artifact is absent or empty."""

    exit_code = 7


class LoopThroughNode(EdlabError):
    """Circulation loop passes through a density node; result unreliable."""

    exit_code = 8


class DegenerateFit(EdlabError):
    """Power-law fit requested on nonpositive or insufficient data."""

    exit_code = 9
