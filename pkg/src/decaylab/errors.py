"""Exception hierarchy shared by all decaylab modules."""


class DecaylabError(Exception):
    """Base class for all errors raised by this package."""


class ConstraintViolation(DecaylabError):
    """Parameter pack violates one of its defining inequalities."""


class PreconditionViolation(DecaylabError):
    """An operation was called outside its stated domain of validity."""


class DomainMismatch(DecaylabError):
    """Field spec cannot be evaluated on the given grid."""


class DisconnectedExterior(DecaylabError):
    """Obstacle mask splits the computational domain."""


class BranchError(DecaylabError):
    """Special-function argument lies on (or too close to) an excluded ray."""


class CoincidencePoint(DecaylabError):
    """Kernel evaluation requested at x = y."""


class StripViolation(DecaylabError):
    """Spectral parameter left the strip where the continuation is valid."""


class QuadratureUnderResolved(DecaylabError):
    """Refining the quadrature still changes the result beyond tolerance."""


class FactorizationFailure(DecaylabError):
    """Sparse factorization broke down (shift too close to the spectrum)."""


class NeumannDivergence(DecaylabError):
    """Perturbation series does not contract at the requested parameter."""


class AnchorSingular(DecaylabError):
    """Resolvent solve at the continuation anchor failed."""


class PoleInDisc(DecaylabError):
    """Cauchy contour encircles a pole of the continued resolvent."""


class OrderExceeded(DecaylabError):
    """Derivative order beyond what the cutoff family supports."""


class BoundViolation(DecaylabError):
    """A construction-time bound check failed (internal consistency guard)."""


class SizeExceeded(DecaylabError):
    """Operator is larger than the configured dense-solver limit."""


class InvalidGrid(DecaylabError):
    """Sweep grid is not strictly increasing or otherwise malformed."""


class SchemaMismatch(DecaylabError):
    """Artifact file does not match the expected schema or format version."""


class ConfigError(DecaylabError):
    """Experiment configuration failed to parse or validate."""


class NumericalFailure(DecaylabError):
    """An experiment violated one of its numerical invariants at runtime."""
