"""Backend selection for the row-wise kernels.

The compiled extension is used when it imports; otherwise (or when
``TXER_PURE_PYTHON=1`` is set) the numpy implementation is used. Both expose
the same functions, see ``_kernels_py``.
"""

import os

from . import _kernels_py as python_backend

try:
    if os.environ.get("TXER_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _kernels as compiled_backend
except ImportError:
    compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND_NAME = "compiled" if compiled_backend is not None else "python"

KERNEL_NAMES = (
    "softmax_forward",
    "softmax_backward",
    "layer_norm_forward",
    "layer_norm_backward",
    "gelu_forward",
    "gelu_backward",
)


def use_backend(name):
    """Switch the active backend ("compiled" or "python"); returns the previous name."""
    global backend, BACKEND_NAME
    previous = BACKEND_NAME
    if name == "compiled":
        if compiled_backend is None:
            raise RuntimeError("compiled kernels are not available in this build")
        backend = compiled_backend
    elif name == "python":
        backend = python_backend
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND_NAME = name
    return previous
