"""Hot kernels with a compiled implementation and a numpy fallback.

The compiled extension is used when it was built and importable.  Setting
``REGMAP_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _locate_py as python_backend

compiled_backend = None
if os.environ.get("REGMAP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _locate as compiled_backend  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

locate_candidates = _impl.locate_candidates
p1_interpolate = _impl.p1_interpolate

__all__ = ["BACKEND", "locate_candidates", "p1_interpolate", "python_backend", "compiled_backend"]
