"""Exception types shared across the package.

Contract violations on in-memory values raise plain ValueError; these two
classes distinguish the failure modes the command line maps to dedicated
exit codes.
"""


class DataError(Exception):
    """A file or payload is missing, malformed or inconsistent."""


class NumericalError(Exception):
    """A numerical procedure failed (divergence, singular system, ...)."""
