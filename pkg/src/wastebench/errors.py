"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
stable contract: 1 for IO problems, 2 for validation problems, 3 for a
diverged training run.
"""


class WasteBenchError(Exception):
    exit_code = 2


class ValidationError(WasteBenchError, ValueError):
    exit_code = 2


class IOFailure(WasteBenchError, OSError):
    exit_code = 1


# manifest
class MissingFile(IOFailure, FileNotFoundError):
    pass


class SchemaViolation(ValidationError):
    pass


class DuplicateId(ValidationError):
    pass


class UnknownId(ValidationError):
    pass


class StaleCorrection(ValidationError):
    pass


class EmptyManifest(ValidationError):
    pass


class MissingImageFile(IOFailure):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(self.missing[:10])
        more = f" (+{len(self.missing) - 10} more)" if len(self.missing) > 10 else ""
        super().__init__(f"{len(self.missing)} image file(s) not found: {shown}{more}")


# pipeline
class UndecodableImage(ValidationError):
    pass


class InvalidCropWindow(ValidationError):
    pass


class EmptyClass(ValidationError):
    pass


# models
class UnknownArchitecture(ValidationError):
    pass


class WeightsUnavailable(IOFailure):
    pass


class PrefixOutOfRange(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


# trainer
class LabelOutOfRange(ValidationError):
    pass


class UnknownOptimizer(ValidationError):
    pass


class MissingHyperparam(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class DivergedTraining(WasteBenchError):
    exit_code = 3


# metrics
class MissingLabel(ValidationError):
    pass


class EmptyCounts(ValidationError):
    pass


class ZeroSupport(ValidationError):
    pass


class DegenerateLabels(ValidationError):
    pass


class UnknownModelName(ValidationError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# fusion / prediction files
class MalformedRow(ValidationError):
    def __init__(self, row, reason):
        self.row = row
        self.reason = reason
        super().__init__(f"row {row}: {reason}")


class NormalizationViolation(ValidationError):
    pass


class FilenameMismatch(ValidationError):
    def __init__(self, difference):
        self.difference = sorted(difference)
        shown = ", ".join(self.difference[:20])
        super().__init__(f"filename sets differ; symmetric difference ({len(self.difference)}): {shown}")


class LabelConflict(ValidationError):
    pass


# cli
class ConfigError(ValidationError):
    pass
