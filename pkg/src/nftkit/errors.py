"""Exception hierarchy shared across the toolkit.

Every operation either returns a value or raises a subclass of
:class:`NftkitError`; callers can rely on ``error_code()`` for
machine-readable, module-qualified error identifiers.
"""

from __future__ import annotations


class NftkitError(Exception):
    """Base class for all toolkit errors."""

    def error_code(self) -> str:
        mod = type(self).__module__.rsplit(".", 1)[-1]
        return f"{mod}.{type(self).__name__}"
