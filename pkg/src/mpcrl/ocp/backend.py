"""Interior-point kernel selection.

The compiled kernel is used when it imports; set ``MPCRL_PURE_PYTHON=1`` to
force the numpy fallback.  Both expose ``solve_qp`` with the same signature.
"""
from __future__ import annotations

import os

from . import _ipm_py

OPTIMAL, MAX_ITER, INFEASIBLE, SINGULAR = _ipm_py.OPTIMAL, _ipm_py.MAX_ITER, _ipm_py.INFEASIBLE, _ipm_py.SINGULAR

try:
    if os.environ.get("MPCRL_PURE_PYTHON") == "1":
        raise ImportError("pure-Python backend requested")
    from . import _ipm_core as _compiled
except ImportError:
    _compiled = None

BACKENDS = {"python": _ipm_py.solve_qp}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled.solve_qp

BACKEND = "compiled" if _compiled is not None else "python"


def solve_qp(P, p, E, e, G, w, tol=1e-9, max_iter=100, backend: str | None = None):
    return BACKENDS[backend or BACKEND](P, p, E, e, G, w, tol, max_iter)
