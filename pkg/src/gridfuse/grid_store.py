"""Alias of :mod:`gridfuse.grid` under its component name."""

from .grid import *  # noqa: F401,F403
