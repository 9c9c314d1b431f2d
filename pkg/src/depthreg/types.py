"""Shared constants and the contract-violation error."""

CLASS_NAMES = ("Background", "Femur", "Tibia", "Meniscus", "ACL")
NUM_CLASSES = len(CLASS_NAMES)
FOREGROUND_CLASSES = (1, 2, 3, 4)


class ContractViolation(ValueError):
    """Raised when an input breaks a documented precondition."""
