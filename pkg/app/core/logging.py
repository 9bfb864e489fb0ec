import logging
from typing import Optional

from app.core.config import settings

_configured = False


def setup_logging(level: Optional[str] = None) -> None:
    """Install a single stream handler on the ``app`` logger."""
    global _configured
    root = logging.getLogger("app")
    root.setLevel((level or settings.LOG_LEVEL).upper())
    if _configured:
        return
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(settings.LOG_FORMAT))
    root.addHandler(handler)
    root.propagate = False
    _configured = True
