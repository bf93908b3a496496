"""Exception types shared across the package."""


class TrajdiffError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(TrajdiffError):
    """Array shapes disagree with what the operation requires."""


class DegenerateRotation(TrajdiffError):
    """6D rotation input cannot be orthonormalized (near-zero column)."""


class NotARotation(TrajdiffError):
    """Matrix is not orthonormal with determinant +1."""


class BadCount(TrajdiffError):
    """Requested sample count is out of range."""


class BadRange(TrajdiffError):
    """Schedule parameters outside their valid range."""


class BadStep(TrajdiffError):
    """Diffusion step index outside 1..N."""


class BadDim(TrajdiffError):
    """Dimension argument invalid (e.g. odd embedding width)."""


class BadDims(TrajdiffError):
    """Image dimensions incompatible with the operation."""


class MissingGradient(TrajdiffError):
    """Optimizer step requested before gradients were populated."""


class HorizonMismatch(TrajdiffError):
    """Trajectory horizon differs from what the model was built for."""


class DimensionMismatch(TrajdiffError):
    """Latent vector dimension differs from the model's latent width."""


class EmptyText(TrajdiffError):
    """Instruction text is empty."""


class TagMismatch(TrajdiffError):
    """Text embeddings combined in the wrong order or of the wrong kind."""


class ModeMismatch(TrajdiffError):
    """Noisy target shape inconsistent with the configured diffusion space."""


class EmptyCloud(TrajdiffError):
    """No valid depth pixels; scene token construction impossible."""


class Unachievable(TrajdiffError):
    """Task predicate cannot be satisfied from the given start state."""


class ConfigError(TrajdiffError):
    """Run configuration is invalid (unknown key, missing field, bad path)."""
