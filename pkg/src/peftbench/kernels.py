"""Convolution patch kernels with a compiled fast path.

``im2col``/``col2im`` dominate the runtime of the CNN and denoiser models.
At import time we pick the Cython extension when it was built, otherwise a
pure-numpy fallback. Both paths produce bitwise-identical arrays (gather,
and scatter-add in the same per-element order), so results never depend on
which backend is active. Set ``PEFTBENCH_PURE_NUMPY=1`` to force the
fallback, e.g. for benchmarking.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from . import _convkernels as _ext
except ImportError:
    _ext = None

if os.environ.get("PEFTBENCH_PURE_NUMPY"):
    _ext = None

HAS_COMPILED_KERNELS = _ext is not None


def conv_out_size(h: int, w: int, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int):
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(
            f"conv2d: kernel ({kh}x{kw}) with stride ({sh},{sw}) and padding "
            f"({ph},{pw}) does not fit input ({h}x{w})"
        )
    return ho, wo


def im2col_numpy(x: np.ndarray, kh, kw, sh, sw, ph, pw) -> np.ndarray:
    """(B,C,H,W) -> (B, C*kh*kw, Ho*Wo) patch matrix."""
    b, c, h, w = x.shape
    ho, wo = conv_out_size(h, w, kh, kw, sh, sw, ph, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    view = view[:, :, ::sh, ::sw]  # (B, C, Ho, Wo, kh, kw)
    cols = view.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def col2im_numpy(cols: np.ndarray, c, h, w, kh, kw, sh, sw, ph, pw) -> np.ndarray:
    """Adjoint of im2col: scatter-add patches back to (B,C,H,W)."""
    b = cols.shape[0]
    ho, wo = conv_out_size(h, w, kh, kw, sh, sw, ph, pw)
    cols6 = cols.reshape(b, c, kh, kw, ho, wo)
    xp = np.zeros((b, c, h + 2 * ph, w + 2 * pw))
    # Kernel-position outer loop keeps the per-element accumulation order
    # identical to the compiled kernel.
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += cols6[:, :, i, j]
    if ph or pw:
        return xp[:, :, ph : ph + h, pw : pw + w].copy()
    return xp


def im2col(x: np.ndarray, kh, kw, sh, sw, ph, pw) -> np.ndarray:
    if _ext is not None:
        return _ext.im2col(np.ascontiguousarray(x), kh, kw, sh, sw, ph, pw)
    return im2col_numpy(x, kh, kw, sh, sw, ph, pw)


def col2im(cols: np.ndarray, c, h, w, kh, kw, sh, sw, ph, pw) -> np.ndarray:
    if _ext is not None:
        return _ext.col2im(np.ascontiguousarray(cols), c, h, w, kh, kw, sh, sw, ph, pw)
    return col2im_numpy(cols, c, h, w, kh, kw, sh, sw, ph, pw)
