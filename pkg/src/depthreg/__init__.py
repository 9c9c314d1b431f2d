"""Semantic segmentation regularised by self-supervised stereo depth."""

from depthreg.types import CLASS_NAMES, NUM_CLASSES, ContractViolation

__all__ = ["CLASS_NAMES", "NUM_CLASSES", "ContractViolation"]
__version__ = "0.1.0"
