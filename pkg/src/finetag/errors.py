"""Exception hierarchy.

Every error carries an ``exit_code`` used by the CLI: 2 for bad input or
configuration, 1 for failures discovered while running.
"""


class FineTagError(Exception):
    exit_code = 2


class RuntimeFailure(FineTagError):
    exit_code = 1


# data
class MalformedLine(FineTagError):
    def __init__(self, message, line_no=None, source=None):
        where = ""
        if source is not None:
            where += f"{source}:"
        if line_no is not None:
            where += f"{line_no}: "
        super().__init__(where + message)
        self.line_no = line_no
        self.source = source


class DuplicateId(FineTagError):
    pass


class NonContiguousIds(FineTagError):
    pass


class ImageIdOutOfRange(FineTagError):
    pass


class AttributeIdOutOfRange(FineTagError):
    pass


class InvalidPresenceFlag(FineTagError):
    pass


class ValSizeTooLarge(FineTagError):
    pass


class UnknownImageId(FineTagError):
    pass


class MissingFile(FineTagError):
    pass


# binary formats
class BadMagic(FineTagError):
    pass


class CorruptRecord(RuntimeFailure):
    pass


class IoFailure(RuntimeFailure):
    pass


class MixedChannelCount(FineTagError):
    pass


class DuplicateImageId(FineTagError):
    pass


class MissingId(FineTagError):
    def __init__(self, image_id):
        super().__init__(f"image id {image_id} not present in store")
        self.image_id = image_id


class NonFiniteValue(RuntimeFailure):
    def __init__(self, image_id, channel):
        super().__init__(f"non-finite value in image {image_id}, channel {channel}")
        self.image_id = image_id
        self.channel = channel


# numerics
class ShapeMismatch(FineTagError):
    pass


class SpatialShapeMismatch(ShapeMismatch):
    pass


class DimMismatch(ShapeMismatch):
    pass


class ConfigMismatch(FineTagError):
    pass


class LengthMismatch(FineTagError):
    pass


class PerImageTooLarge(FineTagError):
    pass


class RankDeficient(FineTagError):
    pass


class DegenerateSamples(FineTagError):
    pass


class StaleCache(FineTagError):
    pass


class EmptyPositiveSet(FineTagError):
    pass


class EmptyNegativeSet(FineTagError):
    pass


class EmptyRelevantSet(FineTagError):
    pass


class NonFiniteLogit(RuntimeFailure):
    pass


class AllImagesSkipped(RuntimeFailure):
    pass


class NonFiniteLoss(RuntimeFailure):
    pass


class NonFiniteEvaluation(RuntimeFailure):
    pass


class ConvergenceWarning(UserWarning):
    """FastICA stopped at ``max_iter`` before reaching ``tol``."""
