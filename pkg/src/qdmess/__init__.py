"""Open quantum system dynamics from rational fits of the bath noise power."""

__version__ = "0.1.0"
