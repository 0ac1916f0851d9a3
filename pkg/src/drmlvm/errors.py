class NumericDomainError(ArithmeticError):
    """A matrix that must be positive definite is not, or a sum that must be positive is not."""


class ModeFailure(RuntimeError):
    """Newton's method for a subject's posterior mode did not converge.

    ``last_iterate`` holds the final iterate(s) and ``subjects`` the indices
    (within the batch) that failed.
    """

    def __init__(self, message, last_iterate=None, subjects=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.subjects = subjects


class InfeasibleConfig(ValueError):
    pass


class SingularHessianError(ArithmeticError):
    """Raised when H is singular; ``direction`` is the offending eigenvector."""

    def __init__(self, message, direction=None, eigenvalue=None):
        super().__init__(message)
        self.direction = direction
        self.eigenvalue = eigenvalue
