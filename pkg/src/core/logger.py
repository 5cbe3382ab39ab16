"""Color console logging that coexists with tqdm bars, plus dated and per-run log files."""

from __future__ import annotations

import logging
from contextlib import contextmanager
from datetime import datetime
from typing import TYPE_CHECKING, Any, cast

import colorlog
from tqdm import tqdm

from .config import config

if TYPE_CHECKING:
    from collections.abc import Iterator
    from pathlib import Path

NOTICE = 25
logging.addLevelName(NOTICE, 'NOTICE')

CONSOLE_FORMAT = '%(log_color)s[%(name)s]%(message)s'
FILE_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
RUN_LOG_NAME = 'run.log'


class SpowlLogger(logging.Logger):
    """Logger with an extra NOTICE level for run milestones."""

    def notice(self, msg: str, *args: Any, **kwargs: Any) -> None:
        self.log(NOTICE, msg, *args, **kwargs)


logging.setLoggerClass(SpowlLogger)
app_logger = logging.getLogger('spowl')


class TqdmLoggingHandler(logging.Handler):
    """Writes through ``tqdm.write`` so open progress bars are redrawn below the message."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            tqdm.write(self.format(record))
        except Exception:  # noqa: BLE001
            self.handleError(record)


def _console_handler() -> logging.Handler:
    colors = {**colorlog.default_log_colors, 'NOTICE': 'cyan'}
    handler = TqdmLoggingHandler()
    handler.setFormatter(colorlog.ColoredFormatter(CONSOLE_FORMAT, log_colors=colors))
    return handler


def _file_handler(path: Path, mode: str = 'a') -> logging.Handler | None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(path, mode=mode, encoding='utf-8')
    except OSError as exc:
        app_logger.warning('File logging to %s disabled: %s', path, exc)
        return None
    handler.setFormatter(logging.Formatter(FILE_FORMAT))
    return handler


_dated_path: Path | None = None
_dated_handler: logging.Handler | None = None


def configure(log_dir: Path | None = None) -> None:
    """Attach the console handler once and point the dated file handler at ``log_dir``.

    Without ``log_dir`` an already attached dated handler is kept; otherwise the
    configured ``log_dir`` is used.
    """
    global _dated_path, _dated_handler
    if not getattr(app_logger, '_spowl_configured', False):
        app_logger.addHandler(_console_handler())
        app_logger.setLevel(logging.INFO)
        app_logger._spowl_configured = True  # type: ignore[attr-defined]  # noqa: SLF001
    if log_dir is None and _dated_path is not None:
        return
    stamp = datetime.now().astimezone().strftime('%Y%m%d')
    path = (log_dir or config.log_dir) / f'{stamp}.log'
    if path == _dated_path:
        return
    if _dated_handler is not None:
        app_logger.removeHandler(_dated_handler)
        _dated_handler.close()
    _dated_path, _dated_handler = path, _file_handler(path)
    if _dated_handler is not None:
        app_logger.addHandler(_dated_handler)


def dated_log_path() -> Path | None:
    return _dated_path


@contextmanager
def run_log(run_dir: Path) -> Iterator[Path]:
    """Mirror every record of the block into ``run_dir/run.log``."""
    configure()
    path = run_dir / RUN_LOG_NAME
    handler = _file_handler(path, mode='w')
    if handler is not None:
        app_logger.addHandler(handler)
    try:
        yield path
    finally:
        if handler is not None:
            app_logger.removeHandler(handler)
            handler.close()


def get(name: str) -> SpowlLogger:
    """Get a child of the application logger.

    Args:
        name (str): dotted name below ``spowl``

    Returns:
        SpowlLogger: logger instance

    """
    configure()
    return cast('SpowlLogger', app_logger.getChild(name))
