"""Residual-stream direction workbench: Python access to the C++ engine."""

try:
    from ._repmech import *  # noqa: F401,F403
    from ._repmech import RepmechError
except ImportError:  # in-tree build: the extension sits next to, not inside, the package
    from _repmech import *  # noqa: F401,F403
    from _repmech import RepmechError

__all__ = [name for name in dir() if not name.startswith("_")]
