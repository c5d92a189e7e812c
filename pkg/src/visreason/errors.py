"""Shared exception base for the package.

Concrete errors live next to the module that raises them; everything
derives from VisreasonError so callers can catch package failures broadly.
"""


class VisreasonError(Exception):
    pass
