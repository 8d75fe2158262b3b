"""Plan and evaluate partial TEE shielding of small convolutional networks."""

from .errors import Unsatisfiable

__version__ = "0.1.0"

__all__ = ["Unsatisfiable", "__version__"]
