"""Sequential activities: one thread each, with captured result or error."""

from __future__ import annotations

import threading
import time
from typing import Callable, Optional, Sequence

_SENTINEL = object()


class Activity:
    """Runs ``target(*args)`` on its own thread and keeps the outcome."""

    def __init__(self, target: Callable, *args, name: Optional[str] = None) -> None:
        self.name = name or getattr(target, "__name__", "activity")
        self._result = _SENTINEL
        self.exception: Optional[BaseException] = None
        self._thread = threading.Thread(target=self._run, args=(target, args),
                                        name=self.name, daemon=True)
        self._thread.start()

    def _run(self, target, args) -> None:
        try:
            self._result = target(*args)
        except BaseException as exc:
            self.exception = exc

    @property
    def done(self) -> bool:
        return not self._thread.is_alive()

    def join(self, timeout: Optional[float] = None):
        """Wait for completion; re-raises the activity's exception."""
        self._thread.join(timeout)
        if self._thread.is_alive():
            raise TimeoutError(f"activity {self.name!r} still running")
        if self.exception is not None:
            raise self.exception
        return self._result

    def result(self):
        if self._result is _SENTINEL:
            raise RuntimeError(f"activity {self.name!r} has no result")
        return self._result


def join_all(activities: Sequence[Activity], abort: Optional[Callable] = None,
             poll: float = 0.05, timeout: Optional[float] = None) -> None:
    """Join every activity; on the first failure run ``abort`` once (typically
    closing channel ends so blocked peers unwind) and re-raise that failure
    after the rest have stopped."""
    deadline = time.monotonic() + timeout if timeout is not None else None
    first: Optional[BaseException] = None
    aborted = False
    pending = list(activities)
    while pending:
        for a in list(pending):
            a._thread.join(poll)
            if a.done:
                pending.remove(a)
                if a.exception is not None and first is None:
                    first = a.exception
        if first is not None and not aborted:
            aborted = True
            if abort is not None:
                abort()
        if deadline is not None and time.monotonic() > deadline and pending:
            names = [a.name for a in pending]
            raise TimeoutError(f"activities did not finish: {names}") from first
    if first is not None:
        raise first
