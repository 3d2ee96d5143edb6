"""Exception types shared across the pipeline."""


class DeepBcrError(Exception):
    """Base class for all pipeline errors."""


# bag container / cohort
class BagFormatError(DeepBcrError, ValueError):
    pass


class MagicMismatch(BagFormatError):
    pass


class VersionUnsupported(BagFormatError):
    pass


class TruncatedFile(BagFormatError):
    pass


class NonFiniteFeature(BagFormatError):
    pass


class InvalidBag(DeepBcrError, ValueError):
    pass


class InsufficientClass(DeepBcrError, ValueError):
    pass


class InvalidSpec(DeepBcrError, ValueError):
    pass


# masks
class CoordOutOfBounds(DeepBcrError, IndexError):
    pass


class DuplicateCoord(DeepBcrError, ValueError):
    pass


class EmptyTumorBulk(DeepBcrError):
    pass


# autodiff
class ShapeMismatch(DeepBcrError, ValueError):
    pass


class NonFiniteValue(DeepBcrError, FloatingPointError):
    pass


class GraphCycle(DeepBcrError, RuntimeError):
    pass


class NonScalarLoss(DeepBcrError, ValueError):
    pass


class CheckpointFormatError(DeepBcrError, ValueError):
    pass


# models / training
class EmptyBag(DeepBcrError, ValueError):
    pass


class SingleClassDataset(DeepBcrError, ValueError):
    pass


class EmptyValidation(DeepBcrError, ValueError):
    pass


# evaluation
class DegenerateLabels(DeepBcrError, ValueError):
    pass


class UnachievableTarget(DeepBcrError, ValueError):
    pass


class DegenerateLogits(DeepBcrError, ValueError):
    pass


class SubgroupTooSmall(DeepBcrError, ValueError):
    pass
