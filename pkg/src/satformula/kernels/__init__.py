"""Expression evaluation kernels.

The compiled extension ``_ckernels`` is used when it has been built; the
numpy module ``_pykernels`` is the fallback. Set ``SATFORMULA_KERNELS=python``
to force the fallback.

Guard constants for the protected operators live here and are passed to
whichever backend runs.
"""

import os

from . import _pykernels

EPS_DIV = 1e-6
EPS_LOG = 1e-6
EXP_MAX = 40.0
VALUE_MAX = 1e100  # node outputs are clamped to +-VALUE_MAX

GUARDS = (EPS_DIV, EPS_LOG, EXP_MAX, VALUE_MAX)

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["native"] = _ckernels


def _select():
    wanted = os.environ.get("SATFORMULA_KERNELS", "").strip().lower()
    if wanted:
        if wanted not in BACKENDS:
            raise ImportError(f"kernel backend {wanted!r} unavailable; have {sorted(BACKENDS)}")
        return wanted
    return "native" if "native" in BACKENDS else "python"


BACKEND_NAME = _select()
backend = BACKENDS[BACKEND_NAME]


def get_backend(name=None):
    return backend if name is None else BACKENDS[name]
