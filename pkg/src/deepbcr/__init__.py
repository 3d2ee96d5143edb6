"""Deep-BCR-Auto: slide-level recurrence-risk prediction from bags of patch features."""

__version__ = "0.1.0"
