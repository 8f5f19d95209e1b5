""" Text-guided referring image segmentation """
import logging

from .config import RunConfig, load_config
from .exceptions import CrossModalSegError

__version__ = "0.1.0"

LOG = logging.getLogger(__name__)

__all__ = ["CrossModalSegError", "RunConfig", "load_config", "__version__"]
