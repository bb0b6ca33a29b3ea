"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so every failure that can reach a user
should be one of these rather than a bare ValueError.
"""


class TaskNeuronsError(Exception):
    """Base class for all package errors."""


class EngineInputError(TaskNeuronsError, ValueError):
    """Bad tokens, positions or neuron addresses handed to the model."""


class NumericError(TaskNeuronsError, ArithmeticError):
    """A non-finite value showed up where only finite ones are legal."""


class TrainingDivergence(NumericError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class IntegrityError(TaskNeuronsError):
    """A weight file or artifact failed its hash check."""


class AquaError(TaskNeuronsError, ValueError):
    """Invalid question, proxy set or prompt template."""


class TaskError(TaskNeuronsError, ValueError):
    """A task specification cannot be satisfied."""


class PlantedConstructionError(TaskNeuronsError):
    """A planted neuron failed its ablation margin check."""


class ConfigError(TaskNeuronsError, ValueError):
    """Invalid run configuration."""


class MissingArtifact(TaskNeuronsError, FileNotFoundError):
    """An upstream artifact a command depends on does not exist."""


class StaleArtifact(TaskNeuronsError):
    """An artifact was produced from different upstream inputs."""
