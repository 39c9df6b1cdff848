"""Hot-loop kernels with a compiled core and a pure-Python fallback.

The compiled Cython module is preferred when it imported cleanly; set
``GVARNET_PURE_PYTHON=1`` to force the fallback (used by the benchmark and
by backend-parity tests). ``BACKEND`` reports which one is active.
"""

import os

from . import _py

_FORCE_PY = os.environ.get("GVARNET_PURE_PYTHON", "").lower() in ("1", "true", "yes")

if not _FORCE_PY:
    try:
        from . import _cy as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _py
        BACKEND = "python"
else:
    _impl = _py
    BACKEND = "python"

lasso_cd = _impl.lasso_cd
mrce_cd = _impl.mrce_cd


def get_backend(name):
    """Return the kernel module for ``name`` in {'python', 'cython'}.

    Raises ImportError if the compiled backend was requested but is not
    built in this environment.
    """
    if name == "python":
        return _py
    if name == "cython":
        from . import _cy

        return _cy
    raise ValueError(f"unknown kernel backend {name!r}")
