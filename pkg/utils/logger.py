"""Simple application logger used by the engines and the command line."""

from __future__ import annotations

import sys
from datetime import datetime
from typing import Callable

LogListener = Callable[[str], None]

_listeners: list[LogListener] = []
_console_enabled = True


def register_listener(listener: LogListener) -> None:
    """Register callback that receives formatted log messages."""
    if listener not in _listeners:
        _listeners.append(listener)


def unregister_listener(listener: LogListener) -> None:
    """Unregister previously added log callback."""
    if listener in _listeners:
        _listeners.remove(listener)


def set_console(enabled: bool) -> None:
    """Turn the stderr sink on or off; listeners are not affected."""
    global _console_enabled
    _console_enabled = enabled


def log(message: str) -> None:
    """Print message to stderr and broadcast it to listeners."""
    formatted = f"[{datetime.now().strftime('%H:%M:%S')}] {message}"
    if _console_enabled:
        print(formatted, file=sys.stderr)
    for listener in list(_listeners):
        listener(formatted)
