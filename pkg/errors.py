"""Domain exceptions shared by every stage."""


class ValidationError(ValueError):
    """An input violates a documented precondition."""


class DimensionError(ValueError):
    """Tensor shape or resolution does not match the configured one."""


class DegenerateCenterError(ValueError):
    """A classifier weight row has zero norm and cannot be a center."""


class SubjectMappingError(KeyError):
    """A manifest subject has no class in the classifier head."""


class NumericError(ArithmeticError):
    """A value became non-finite or left its admissible range."""


class StageError(RuntimeError):
    """A pipeline stage failed; the partial state has been persisted."""

    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
