"""Shared exception types."""


class MismatchError(ValueError):
    """Inputs disagree in dimension, level, or time grid."""


class InvalidElementError(ValueError):
    """A group element violates the algebraic constraint it is required to satisfy.

    Carries the numeric size of the violation in ``defect``.
    """

    def __init__(self, message, defect):
        super().__init__(f"{message} (defect={defect:.3e})")
        self.defect = defect


class GridTooCoarseError(RuntimeError):
    """A single grid step already exceeds the local-variation budget alpha.

    The accumulated alpha-local variation is not faithfully computable on
    such a grid; ``step`` names the first offending interval.
    """

    def __init__(self, step, omega_step, alpha):
        super().__init__(
            f"grid too coarse for alpha={alpha}: "
            f"omega(t_{step}, t_{step + 1})={omega_step:.6e} > alpha"
        )
        self.step = step
        self.omega_step = omega_step
        self.alpha = alpha


class DivergenceError(RuntimeError):
    """Numerical blow-up during an RDE solve."""

    def __init__(self, step, particle=None):
        where = f"step {step}" if particle is None else f"step {step}, particle {particle}"
        super().__init__(f"solution diverged at {where}")
        self.step = step
        self.particle = particle


class ConfigError(ValueError):
    """Invalid experiment configuration."""
