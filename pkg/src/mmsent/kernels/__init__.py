"""Backend selection and argument validation for the hot kernels.

The environment variable ``MMSENT_KERNELS`` picks the backend at import
time: ``auto`` (default) prefers the compiled extension and falls back
to numpy, ``compiled`` requires the extension, ``python`` forces the
numpy reference.  All public functions validate shapes and coerce to
C-contiguous float64 before dispatching, so both backends present the
same contract.

In ``auto`` mode the convolution additionally dispatches per call on
arithmetic size: small channel blocks run the C loops, large ones go
through the numpy reference where the matmuls hit BLAS (measured
crossover near 3e4 multiply-accumulates per output pass).
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import ConfigError, DimensionError
from . import reference

_requested = os.environ.get("MMSENT_KERNELS", "auto").strip().lower()
if _requested not in {"auto", "python", "compiled"}:
    raise ConfigError(
        f"MMSENT_KERNELS must be auto, python or compiled, got '{_requested}'"
    )

if _requested == "python":
    _impl = reference
else:
    try:
        from . import _fast as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "compiled":
            raise ConfigError(
                "MMSENT_KERNELS=compiled but the extension is not built"
            ) from None
        _impl = reference

BACKEND: str = _impl.BACKEND

# conv work (output frames * kernel * C_in * C_out) above which the
# BLAS-backed reference overtakes the C loops; only consulted in auto
_CONV_BLAS_CUTOFF = 30000
_adaptive_conv = _requested == "auto" and BACKEND == "compiled"


def _conv_impl(work: int):
    if _adaptive_conv and work >= _CONV_BLAS_CUTOFF:
        return reference
    return _impl


def available_backends():
    """Name-to-module map of every importable backend."""
    out = {"python": reference}
    try:
        from . import _fast

        out["compiled"] = _fast
    except ImportError:
        pass
    return out


def _c64(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


def _check_lstm_args(x, w, b, h0, c0):
    if x.ndim != 2:
        raise DimensionError(f"lstm input must be (T, I), got {x.shape}")
    if h0.ndim != 1 or c0.shape != h0.shape:
        raise DimensionError(
            f"initial states must be equal-length vectors, got {h0.shape} and {c0.shape}"
        )
    H = h0.shape[0]
    I = x.shape[1]
    if w.shape != (4 * H, I + H):
        raise DimensionError(
            f"lstm weights must be {(4 * H, I + H)} for I={I}, H={H}, got {w.shape}"
        )
    if b.shape != (4 * H,):
        raise DimensionError(f"lstm bias must be ({4 * H},), got {b.shape}")


def lstm_forward(x, w, b, h0, c0):
    x, w, b, h0, c0 = _c64(x), _c64(w), _c64(b), _c64(h0), _c64(c0)
    _check_lstm_args(x, w, b, h0, c0)
    return _impl.lstm_forward(x, w, b, h0, c0)


def lstm_backward(x, w, h0, c0, hs, cs, gates, d_hs):
    x, w, h0, c0 = _c64(x), _c64(w), _c64(h0), _c64(c0)
    hs, cs, gates, d_hs = _c64(hs), _c64(cs), _c64(gates), _c64(d_hs)
    T, H = x.shape[0], h0.shape[0]
    if hs.shape != (T, H) or cs.shape != (T, H) or d_hs.shape != (T, H):
        raise DimensionError(
            f"saved/backprop states must be ({T}, {H}), got "
            f"{hs.shape}, {cs.shape}, {d_hs.shape}"
        )
    if gates.shape != (T, 4 * H):
        raise DimensionError(f"gates must be ({T}, {4 * H}), got {gates.shape}")
    return _impl.lstm_backward(x, w, h0, c0, hs, cs, gates, d_hs)


def _check_conv_args(x, w, b, stride, pad_left, pad_right):
    if x.ndim != 2:
        raise DimensionError(f"conv input must be (T, C), got {x.shape}")
    if w.ndim != 3 or w.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv weights must be (K, {x.shape[1]}, C_out), got {w.shape}"
        )
    if b.shape != (w.shape[2],):
        raise DimensionError(f"conv bias must be ({w.shape[2]},), got {b.shape}")
    if stride < 1 or pad_left < 0 or pad_right < 0:
        raise DimensionError(
            f"stride must be >= 1 and padding >= 0, got {stride}, {pad_left}, {pad_right}"
        )
    span = x.shape[0] + pad_left + pad_right
    if span < w.shape[0]:
        raise DimensionError(
            f"padded length {span} is shorter than kernel width {w.shape[0]}"
        )


def conv1d_forward(x, w, b, stride=1, pad_left=0, pad_right=0):
    x, w, b = _c64(x), _c64(w), _c64(b)
    _check_conv_args(x, w, b, stride, pad_left, pad_right)
    To = (x.shape[0] + pad_left + pad_right - w.shape[0]) // stride + 1
    impl = _conv_impl(To * w.shape[0] * w.shape[1] * w.shape[2])
    return impl.conv1d_forward(x, w, b, stride, pad_left, pad_right)


def conv1d_backward(x, w, stride, pad_left, pad_right, d_y):
    x, w, d_y = _c64(x), _c64(w), _c64(d_y)
    To = (x.shape[0] + pad_left + pad_right - w.shape[0]) // stride + 1
    if d_y.shape != (To, w.shape[2]):
        raise DimensionError(
            f"output gradient must be ({To}, {w.shape[2]}), got {d_y.shape}"
        )
    impl = _conv_impl(To * w.shape[0] * w.shape[1] * w.shape[2])
    return impl.conv1d_backward(x, w, stride, pad_left, pad_right, d_y)


def conv1d_output_length(length, kernel, stride=1, pad_left=0, pad_right=0):
    return (length + pad_left + pad_right - kernel) // stride + 1
