"""
Logging setup for command-line runs.

One timestamped file per run under `logs/` plus the console.
"""

import logging
from datetime import datetime
from pathlib import Path

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def setup_logging(name, log_dir="logs", level=logging.INFO, console_level=None):
    log_dir = Path(log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")

    file_handler = logging.FileHandler(log_dir / f"{name}_{timestamp}.log", encoding='utf-8')
    file_handler.setLevel(level)
    stream_handler = logging.StreamHandler()
    stream_handler.setLevel(console_level if console_level is not None else level)

    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[file_handler, stream_handler],
        force=True,
    )
    return logging.getLogger(name)
