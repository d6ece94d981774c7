"""Select the compiled kernels when available, else the numpy fallback.

Set ``DETFUSE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
kernels = _fallback

if os.environ.get("DETFUSE_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _kernels as kernels  # noqa: F811
    except ImportError:
        pass
    else:
        BACKEND = "cython"
