"""Graph networks that learn pairwise physics, plus symbolic regression of their messages."""

__version__ = "0.1.0"
