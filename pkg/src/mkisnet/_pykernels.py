"""NumPy fallback for the compiled convolution kernels.

Same signatures and the same per-element accumulation order as ``_kernels``:
each kernel tap is applied as one vectorised multiply-add over the batch,
output-channel and spatial axes, so forward and input-gradient results are
bit-identical to the compiled path.
"""
import numpy as np


def _tap_range(offset, stride, size, limit):
    lo = 0 if offset >= 0 else (-offset + stride - 1) // stride
    t = size - 1 - offset
    hi = 0 if t < 0 else min(limit, t // stride + 1)
    return lo, hi


def conv2d_forward(x, w, stride, padding, num_threads=1):
    B, C, H, W = x.shape
    CO, _, KH, KW = w.shape
    HO = (H + 2 * padding - KH) // stride + 1
    WO = (W + 2 * padding - KW) // stride + 1
    out = np.zeros((B, CO, HO, WO), dtype=x.dtype)
    for ci in range(C):
        for ki in range(KH):
            oh0, oh1 = _tap_range(ki - padding, stride, H, HO)
            if oh0 >= oh1:
                continue
            ih0 = oh0 * stride + ki - padding
            ih1 = (oh1 - 1) * stride + ki - padding + 1
            for kj in range(KW):
                ow0, ow1 = _tap_range(kj - padding, stride, W, WO)
                if ow0 >= ow1:
                    continue
                iw0 = ow0 * stride + kj - padding
                iw1 = (ow1 - 1) * stride + kj - padding + 1
                patch = x[:, ci, ih0:ih1:stride, iw0:iw1:stride]
                out[:, :, oh0:oh1, ow0:ow1] += (
                    patch[:, None, :, :] * w[:, ci, ki, kj][None, :, None, None]
                )
    return out


def conv2d_backward_input(gout, w, stride, padding, H, W, num_threads=1):
    B, CO, HO, WO = gout.shape
    _, CI, KH, KW = w.shape
    out = np.zeros((B, CI, H, W), dtype=gout.dtype)
    for co in range(CO):
        for ki in range(KH):
            oh0, oh1 = _tap_range(ki - padding, stride, H, HO)
            if oh0 >= oh1:
                continue
            ih0 = oh0 * stride + ki - padding
            ih1 = (oh1 - 1) * stride + ki - padding + 1
            for kj in range(KW):
                ow0, ow1 = _tap_range(kj - padding, stride, W, WO)
                if ow0 >= ow1:
                    continue
                iw0 = ow0 * stride + kj - padding
                iw1 = (ow1 - 1) * stride + kj - padding + 1
                out[:, :, ih0:ih1:stride, iw0:iw1:stride] += (
                    gout[:, co, oh0:oh1, ow0:ow1][:, None, :, :]
                    * w[co, :, ki, kj][None, :, None, None]
                )
    return out


def conv2d_backward_weight(gout, x, stride, padding, KH, KW, num_threads=1):
    B, CI, H, W = x.shape
    _, CO, HO, WO = gout.shape
    out = np.zeros((CO, CI, KH, KW), dtype=x.dtype)
    for ki in range(KH):
        oh0, oh1 = _tap_range(ki - padding, stride, H, HO)
        if oh0 >= oh1:
            continue
        ih0 = oh0 * stride + ki - padding
        ih1 = (oh1 - 1) * stride + ki - padding + 1
        for kj in range(KW):
            ow0, ow1 = _tap_range(kj - padding, stride, W, WO)
            if ow0 >= ow1:
                continue
            iw0 = ow0 * stride + kj - padding
            iw1 = (ow1 - 1) * stride + kj - padding + 1
            g = gout[:, :, oh0:oh1, ow0:ow1]
            p = x[:, :, ih0:ih1:stride, iw0:iw1:stride]
            out[:, :, ki, kj] = np.tensordot(g, p, axes=([0, 2, 3], [0, 2, 3]))
    return out
