"""Temporal event-interval detection on multichannel feature sequences.

Importing the package stays light: torch-backed modules (model, losses,
engine, evalkit, explain) are imported lazily on attribute access.
"""

from __future__ import annotations

import importlib

__version__ = "0.1.0"

_LAZY_MODULES = ("model", "losses", "engine", "evalkit", "explain", "cli", "config")


def __getattr__(name):
    if name in _LAZY_MODULES:
        return importlib.import_module(f"ticnet.{name}")
    raise AttributeError(f"module 'ticnet' has no attribute {name!r}")


from . import data, errors, geometry  # noqa: E402  (lightweight, numpy-only)
