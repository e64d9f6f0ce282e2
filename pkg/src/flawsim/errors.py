"""Common exception base for the package.

Concrete error types live next to the code that raises them; everything
derives from FlawsimError so callers can catch the whole family.
"""


class FlawsimError(Exception):
    """Base class for all errors raised by flawsim."""
