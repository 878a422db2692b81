"""Alias of :mod:`gridfuse.autodiff` under its component name."""

from .autodiff import *  # noqa: F401,F403
from .autodiff import gradcheck  # noqa: F401
