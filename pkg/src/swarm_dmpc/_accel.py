"""Backend switch for the hot numeric kernels.

Set ``SWARM_DMPC_NUMBA=0`` before import to force the pure-numpy path.
"""
import os

_flag = os.environ.get("SWARM_DMPC_NUMBA", "1").strip().lower()
USE_NUMBA = _flag not in ("0", "false", "no", "off")

if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False

BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(func):
    """Compile ``func`` with numba when enabled, else return it untouched."""
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(func)
    return func


def worker_count(n_tasks=None):
    """Worker cap from ``SWARM_DMPC_THREADS`` (0 = one per CPU, unset = 1)."""
    raw = os.environ.get("SWARM_DMPC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    if n <= 0:
        n = os.cpu_count() or 1
    if n_tasks is not None:
        n = min(n, max(n_tasks, 1))
    return max(n, 1)
