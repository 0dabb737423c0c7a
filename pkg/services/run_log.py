"""
Centralized logging setup.
All services get their logger from here so the level and format are set in one place.
"""
import logging
import os
import sys

from dotenv import load_dotenv

load_dotenv()

# Log level comes from OMNIFUSE_LOG, e.g. in .env:
#   OMNIFUSE_LOG=DEBUG
_configured = False


def configure(level=None):
    """
    Install the stderr handler on the root logger.

    Args:
        level: Level name or number. Falls back to OMNIFUSE_LOG, then INFO.
    """
    global _configured

    if level is None:
        level = os.getenv('OMNIFUSE_LOG', 'INFO')
    if isinstance(level, str):
        level = logging.getLevelName(level.strip().upper())
        if not isinstance(level, int):
            level = logging.INFO

    root = logging.getLogger()
    if not _configured:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter('[%(name)s] %(message)s'))
        root.addHandler(handler)
        _configured = True
    root.setLevel(level)


def get_logger(tag):
    """Return the logger for a service tag such as 'TRAIN' or 'SELECT'."""
    if not _configured:
        configure()
    return logging.getLogger(tag)


def banner(log, title):
    """Phase header for long-running drivers."""
    log.info("=" * 70)
    log.info(title)
    log.info("=" * 70)
