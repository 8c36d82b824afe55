"""Backend selection for the hot kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``MULTIST_PURE=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKENDS = {"python": _kernels_py}

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    BACKENDS["compiled"] = _ckernels

if _ckernels is not None and os.environ.get("MULTIST_PURE", "") not in ("1", "true", "yes"):
    BACKEND = "compiled"
else:
    BACKEND = "python"

_impl = BACKENDS[BACKEND]

ctc_alpha = _impl.ctc_alpha
ctc_beta = _impl.ctc_beta
ctc_loss_grad = _impl.ctc_loss_grad
ctc_prefix_extend = _impl.ctc_prefix_extend
edit_distance = _impl.edit_distance


def get_backend(name=None):
    """Return the kernel module for ``name`` (default: the active backend)."""
    if name is None:
        name = BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}") from None
