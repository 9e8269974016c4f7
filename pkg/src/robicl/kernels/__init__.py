"""Hot-loop kernels with a compiled fast path and a NumPy fallback.

The compiled extension is selected at import when available; setting
ROBICL_NO_EXT=1 forces the NumPy implementation. `IMPL` names the active
backend so benchmarks and tests can report which one ran.
"""

import os

from . import _reference

if os.environ.get("ROBICL_NO_EXT"):
    _impl = _reference
    IMPL = "numpy"
else:
    try:
        from . import _speed as _impl
        IMPL = "cython"
    except ImportError:
        _impl = _reference
        IMPL = "numpy"

gram_times_vec = _impl.gram_times_vec
attack_coefficients = _impl.attack_coefficients
batch_margins = _impl.batch_margins
attacked_loss = _impl.attacked_loss
attacked_loss_grad = _impl.attacked_loss_grad
