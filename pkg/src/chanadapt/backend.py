"""Backend selection for the numerical kernels.

The compiled extension (``chanadapt._native``) is used when it imported
successfully; otherwise the NumPy implementations take over. Set the
environment variable ``CHANADAPT_BACKEND`` to ``python`` or ``native`` to
force a choice (forcing ``native`` raises if the extension is missing).
"""

import os

from . import _kernels_py

_forced = os.environ.get("CHANADAPT_BACKEND", "").strip().lower()

if _forced == "python":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:
        if _forced == "native":
            raise
        _impl = _kernels_py
        BACKEND = "python"

LINEAR = _kernels_py.LINEAR
RELU = _kernels_py.RELU
ELU_PLUS_ONE = _kernels_py.ELU_PLUS_ONE
SOFTMAX = _kernels_py.SOFTMAX
ELU_EPS = _kernels_py.ELU_EPS

dense_forward = _impl.dense_forward
dense_backward = _impl.dense_backward
adam_step = _impl.adam_step
nesterov_step = _impl.nesterov_step
gmm_diag_logpdf = _impl.gmm_diag_logpdf
gmm_diag_nll_grad = _impl.gmm_diag_nll_grad

ACTIVATION_CODES = {
    "linear": LINEAR,
    "relu": RELU,
    "elu_plus_one": ELU_PLUS_ONE,
    "softmax": SOFTMAX,
}
