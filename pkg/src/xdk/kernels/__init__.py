"""Backend selection for the transducer-loss kernel.

Prefers the compiled Cython extension; falls back to the pure-Python
reference when the extension is missing or ``XDK_KERNEL=numpy`` is set.
Both backends share the signatures::

    forward_alpha(lp_f64, labels_i64, blank) -> (alpha, loss)
    forward_backward(lp_f64, labels_i64, blank, want_grad) -> (loss, grad | None)
"""

import os

from . import transducer_np

if os.environ.get("XDK_KERNEL", "").lower() in ("numpy", "python", "py"):
    _impl = transducer_np
    BACKEND = "numpy"
else:
    try:
        from . import _transducer_cy as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = transducer_np
        BACKEND = "numpy"

forward_alpha = _impl.forward_alpha
forward_backward = _impl.forward_backward
