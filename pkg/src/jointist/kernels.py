"""Kernel backend selection.

Imports the compiled extension when it is available and falls back to the
pure-Python implementation otherwise. Set ``JOINTIST_PURE_PYTHON=1`` to force
the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("JOINTIST_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "compiled"

render_notes = _impl.render_notes
decode_rolls = _impl.decode_rolls
max_matching = _impl.max_matching
