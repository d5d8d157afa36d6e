"""Backend selection for the CTM hot loop.

The compiled extension is used when it was built; otherwise the numpy
implementation is used. Set ``UAVTSE_BACKEND=python`` to force the fallback.
"""

import os

from . import _ctm_py

BACKENDS = {"python": _ctm_py.ctm_step_counts}
try:
    from . import _ctm_ext
except ImportError:  # extension not built
    pass
else:
    BACKENDS["cython"] = _ctm_ext.ctm_step_counts

if os.environ.get("UAVTSE_BACKEND", "").lower() == "python" or "cython" not in BACKENDS:
    BACKEND = "python"
else:
    BACKEND = "cython"

ctm_step_counts = BACKENDS[BACKEND]
