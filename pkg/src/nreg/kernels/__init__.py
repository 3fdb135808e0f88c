"""Hot-loop kernels with a JIT backend and a pure-numpy fallback.

The backend is chosen once, at import time, from the NREG_NUMBA environment
variable:

  NREG_NUMBA=1     require numba (ConfigurationError if it cannot be imported)
  NREG_NUMBA=0     force the numpy fallback
  unset / auto     use numba when available, numpy otherwise

``BACKEND`` names the active choice.  Both implementations stay importable
(``backend_numpy``, and ``backend_numba`` when present) so the benchmark and
the equivalence tests can compare them directly.
"""

import os

from ..errors import ConfigurationError
from . import backend_numpy

_KERNEL_NAMES = [
    "lstm_gates_forward",
    "lstm_gates_backward",
    "adadelta_update",
    "levenshtein",
    "lcs_table",
]

_flag = os.environ.get("NREG_NUMBA", "auto").strip().lower()
if _flag in ("0", "false", "off", "no"):
    backend_numba = None
else:
    try:
        from . import backend_numba
    except ImportError:
        if _flag in ("1", "true", "on", "yes"):
            raise ConfigurationError(
                "NREG_NUMBA=%s but numba is not importable" % _flag
            )
        backend_numba = None

if backend_numba is not None:
    BACKEND = "numba"
    _active = backend_numba
else:
    BACKEND = "numpy"
    _active = backend_numpy

lstm_gates_forward = _active.lstm_gates_forward
lstm_gates_backward = _active.lstm_gates_backward
adadelta_update = _active.adadelta_update
levenshtein = _active.levenshtein
lcs_table = _active.lcs_table

__all__ = _KERNEL_NAMES + ["BACKEND", "backend_numpy", "backend_numba"]
