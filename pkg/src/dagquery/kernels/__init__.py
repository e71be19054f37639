"""Hot numeric kernels with a compiled core and a numpy fallback.

The backend is chosen once at import time.  Set DAGQUERY_KERNELS to
"compiled" or "numpy" to force a backend ("compiled" raises if the
extension is missing); the default "auto" prefers the compiled core.
Matrix products always go through numpy's BLAS on both backends.
"""

from __future__ import annotations

import os

from dagquery.kernels import np_backend

_CHOICES = ("auto", "compiled", "numpy")
_requested = os.environ.get("DAGQUERY_KERNELS", "auto").lower()
if _requested not in _CHOICES:
    raise RuntimeError(
        f"DAGQUERY_KERNELS must be one of {_CHOICES}, got {_requested!r}"
    )

impl = None
BACKEND = "numpy"
if _requested in ("auto", "compiled"):
    try:
        from dagquery.kernels import _core as impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise RuntimeError(
                "DAGQUERY_KERNELS=compiled but the extension is not built"
            )
if impl is None:
    impl = np_backend

masked_softmax = impl.masked_softmax
softmax_grad = impl.softmax_grad
layer_norm = impl.layer_norm
layer_norm_grad = impl.layer_norm_grad
gelu = impl.gelu
gelu_grad = impl.gelu_grad
softmax_xent = impl.softmax_xent
adam_update = impl.adam_update
add_rows = impl.add_rows

__all__ = [
    "BACKEND",
    "masked_softmax",
    "softmax_grad",
    "layer_norm",
    "layer_norm_grad",
    "gelu",
    "gelu_grad",
    "softmax_xent",
    "adam_update",
    "add_rows",
]
