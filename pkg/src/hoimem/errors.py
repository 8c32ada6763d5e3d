"""Exception types shared across the package."""


class InputError(Exception):
    """Invalid user-supplied data: bad files, bad flags, violated invariants.

    Commands translate this to exit code 1; the HTTP layer maps it to 422.
    Anything else that escapes is a runtime failure (exit 2 / HTTP 500).
    """
