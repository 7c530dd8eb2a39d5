"""Top-level package for meshmotion."""

import logging

from meshmotion.config import configure_logger

logger = logging.getLogger(__name__)
logger = configure_logger(logger, output_dir=None, mode='w')

from meshmotion.runner import infer, refine_trajectory, drive_mesh # noqa
from meshmotion.toydata import build_dataset # noqa

try:
    from meshmotion._version import __version__
except ImportError:
    from importlib.metadata import version

    try:
        __version__ = version('meshmotion')
    except Exception:
        __version__ = "unknown"
