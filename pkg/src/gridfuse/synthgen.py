"""Alias of :mod:`gridfuse.synth` under its component name."""

from .synth import *  # noqa: F401,F403
