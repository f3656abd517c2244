"""Switch between numba-compiled kernels and their pure-numpy twins.

Set ``PROMPTSEG_NUMBA=0`` to force the numpy path (also used when numba is
not importable). The flag is read once at import time.
"""

from __future__ import annotations

import os
from typing import Any, Callable

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args: Any, **_: Any) -> Callable:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


USE_NUMBA = HAS_NUMBA and os.environ.get("PROMPTSEG_NUMBA", "1") != "0"


def set_threads(n: int | None = None) -> int:
    """Cap torch intra-op threads; defaults to ``PROMPTSEG_THREADS``.

    The numba kernels are serial, so they need no cap of their own.
    """
    import torch

    if n is None:
        raw = os.environ.get("PROMPTSEG_THREADS")
        if not raw:
            return torch.get_num_threads()
        n = int(raw)
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    torch.set_num_threads(n)
    return n
