""" Exception hierarchy """
from typing import List, NamedTuple


class CrossModalSegError(Exception):

    """Base class for all errors raised by crossmodal_seg"""


class InputError(CrossModalSegError, ValueError):

    """Bad tensors, shapes, token ids, expressions or targets"""


class ConfigurationError(CrossModalSegError, ValueError):

    """Invalid configuration values or inconsistent channel settings"""


class BuildError(ConfigurationError):

    """The model could not be assembled from the config"""


class UsageError(CrossModalSegError):

    """An API was called in a way it does not support"""


class GenerationError(CrossModalSegError):

    """A synthetic scene spec cannot be satisfied"""


class CheckpointError(CrossModalSegError):

    """A checkpoint could not be written, read or trusted"""


class TrainingDivergedError(CrossModalSegError):

    """The training loss became NaN or infinite"""

    def __init__(self, step: int, lr: float, batch_ids: List[str]):
        self.step = step
        self.lr = lr
        self.batch_ids = list(batch_ids)
        super(TrainingDivergedError, self).__init__(
            "Non-finite loss at step %d (lr=%.3g, batch=%s)"
            % (step, lr, ", ".join(self.batch_ids))
        )


class LoadIssue(NamedTuple):

    """One itemized problem found while loading a dataset"""

    identifier: str
    reason: str

    def __str__(self):
        return "%s: %s" % (self.identifier, self.reason)


class DatasetLoadError(CrossModalSegError):

    """One or more annotation records failed validation"""

    def __init__(self, issues: List[LoadIssue]):
        self.issues = list(issues)
        super(DatasetLoadError, self).__init__(
            "%d record(s) failed to load:\n  %s"
            % (len(self.issues), "\n  ".join(str(i) for i in self.issues))
        )
