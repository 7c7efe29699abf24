"""Exception types shared across the package."""


class ConceptShapesError(Exception):
    """Base class for errors raised by this package."""


class InvalidConfigError(ConceptShapesError, ValueError):
    """A configuration value is outside its allowed range."""


class PlacementError(ConceptShapesError):
    """A shape could not be placed fully inside the canvas."""


class ShapeMismatchError(ConceptShapesError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(ConceptShapesError, ValueError):
    """Non-finite values where finite ones are required."""


class GraphError(ConceptShapesError, RuntimeError):
    """A gradient was requested for a tensor not connected to the loss."""


class UnsupportedVariantError(ConceptShapesError, ValueError):
    """The model variant does not support the requested operation."""


class TrainingDivergedError(ConceptShapesError, RuntimeError):
    """Training produced a non-finite loss."""
