"""netflow: discrete and continuum models of biological transportation network formation."""

from netflow.errors import NetflowError

__all__ = ["NetflowError"]
__version__ = "0.1.0"
