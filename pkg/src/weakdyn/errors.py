"""Exception types raised across the package."""


class WeakDynError(Exception):
    """Base class for all package errors."""


class StepSizeUnderflow(WeakDynError, ArithmeticError):
    """Adaptive integrator step fell below the configured floor."""


class DegenerateState(WeakDynError, ValueError):
    """A state component has zero standard deviation."""


class InvalidPlacement(WeakDynError, ValueError):
    """Test-function placement parameters give a non-positive stride."""


class SupportOutOfRange(WeakDynError, ValueError):
    """A test-function support does not fit inside the sampled trajectory."""


class DegenerateTestFunction(WeakDynError, ValueError):
    """Closed-form test-function weights are undefined for the inputs."""


class DegenerateData(WeakDynError, ValueError):
    """A closed-form estimator has a vanishing denominator."""


class ConditionViolation(WeakDynError, ValueError):
    """Test-function weights violate the exactness conditions.

    ``violations`` maps the condition index (1-5) to the absolute residual.
    """

    def __init__(self, violations):
        self.violations = dict(violations)
        detail = ", ".join(f"condition {k}: {v:.3e}" for k, v in sorted(self.violations.items()))
        super().__init__(f"test-function conditions violated ({detail})")


class NonFiniteLoss(WeakDynError, FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, iteration, value):
        self.iteration = iteration
        self.value = value
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")


class ZeroReference(WeakDynError, ValueError):
    """A reference trajectory component is identically zero."""


class DegenerateFit(WeakDynError, ValueError):
    """Affine calibration input has no variance."""
