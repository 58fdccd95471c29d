"""Picks the compiled tabular kernels when available, numpy otherwise.

Set ``PLANVAL_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

BACKEND = "python"
if os.environ.get("PLANVAL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._kernels import plan_path_stats, deterministic_search  # noqa: F401
        BACKEND = "compiled"
    except ImportError:
        pass
if BACKEND == "python":
    from ._kernels_py import plan_path_stats, deterministic_search  # noqa: F401
