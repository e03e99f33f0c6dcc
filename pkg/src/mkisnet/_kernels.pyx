# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Direct-loop convolution kernels.

Every output element is accumulated in the fixed order (input channel, kernel
row, kernel column) starting from zero, the same order used by the pure-Python
fallback and by the brute-force test oracles. Work is split across threads by
whole output planes only, so results do not depend on the thread count.
"""
import numpy as np
from cython cimport floating
from cython.parallel cimport prange


cdef inline Py_ssize_t _lo(Py_ssize_t offset, Py_ssize_t stride) noexcept nogil:
    # smallest o >= 0 with o*stride + offset >= 0
    if offset >= 0:
        return 0
    return (-offset + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t offset, Py_ssize_t stride, Py_ssize_t size,
                           Py_ssize_t limit) noexcept nogil:
    # one past the largest o < limit with o*stride + offset <= size - 1
    cdef Py_ssize_t t = size - 1 - offset
    if t < 0:
        return 0
    t = t // stride + 1
    return t if t < limit else limit


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                   Py_ssize_t stride, Py_ssize_t padding, int num_threads=1):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t CO = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t HO = (H + 2 * padding - KH) // stride + 1
    cdef Py_ssize_t WO = (W + 2 * padding - KW) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((B, CO, HO, WO), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t job, b, co, ci, ki, kj, oh, ow, oh0, oh1, ow0, ow1, off_h, off_w
    cdef floating wv
    cdef floating* op
    cdef floating* xp
    for job in prange(B * CO, nogil=True, num_threads=num_threads, schedule="static"):
        b = job // CO
        co = job % CO
        for ci in range(C):
            for ki in range(KH):
                off_h = ki - padding
                oh0 = _lo(off_h, stride)
                oh1 = _hi(off_h, stride, H, HO)
                for kj in range(KW):
                    wv = w[co, ci, ki, kj]
                    off_w = kj - padding
                    ow0 = _lo(off_w, stride)
                    ow1 = _hi(off_w, stride, W, WO)
                    for oh in range(oh0, oh1):
                        op = &o[b, co, oh, 0]
                        xp = &x[b, ci, oh * stride + off_h, 0]
                        for ow in range(ow0, ow1):
                            op[ow] = op[ow] + xp[ow * stride + off_w] * wv
    return out


def conv2d_backward_input(floating[:, :, :, ::1] gout, floating[:, :, :, ::1] w,
                          Py_ssize_t stride, Py_ssize_t padding,
                          Py_ssize_t H, Py_ssize_t W, int num_threads=1):
    """Gradient of conv2d w.r.t. its input; identical to a transposed convolution.

    ``w`` has shape (CO, CI, KH, KW) where CO is the channel count of ``gout``.
    """
    cdef Py_ssize_t B = gout.shape[0], CO = gout.shape[1]
    cdef Py_ssize_t HO = gout.shape[2], WO = gout.shape[3]
    cdef Py_ssize_t CI = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((B, CI, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] g = out
    cdef Py_ssize_t job, b, co, ci, ki, kj, oh, ow, oh0, oh1, ow0, ow1, off_h, off_w
    cdef floating wv
    cdef floating* gp
    cdef floating* yp
    for job in prange(B * CI, nogil=True, num_threads=num_threads, schedule="static"):
        b = job // CI
        ci = job % CI
        for co in range(CO):
            for ki in range(KH):
                off_h = ki - padding
                oh0 = _lo(off_h, stride)
                oh1 = _hi(off_h, stride, H, HO)
                for kj in range(KW):
                    wv = w[co, ci, ki, kj]
                    off_w = kj - padding
                    ow0 = _lo(off_w, stride)
                    ow1 = _hi(off_w, stride, W, WO)
                    for oh in range(oh0, oh1):
                        gp = &g[b, ci, oh * stride + off_h, 0]
                        yp = &gout[b, co, oh, 0]
                        for ow in range(ow0, ow1):
                            gp[ow * stride + off_w] = gp[ow * stride + off_w] + yp[ow] * wv
    return out


def conv2d_backward_weight(floating[:, :, :, ::1] gout, floating[:, :, :, ::1] x,
                           Py_ssize_t stride, Py_ssize_t padding,
                           Py_ssize_t KH, Py_ssize_t KW, int num_threads=1):
    cdef Py_ssize_t B = x.shape[0], CI = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t CO = gout.shape[1], HO = gout.shape[2], WO = gout.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((CO, CI, KH, KW), dtype=dtype)
    cdef floating[:, :, :, ::1] gw = out
    cdef Py_ssize_t job, b, co, ci, ki, kj, oh, ow, oh0, oh1, ow0, ow1, off_h, off_w
    cdef floating acc
    cdef floating* yp
    cdef floating* xp
    for job in prange(CO * CI, nogil=True, num_threads=num_threads, schedule="static"):
        co = job // CI
        ci = job % CI
        for ki in range(KH):
            off_h = ki - padding
            oh0 = _lo(off_h, stride)
            oh1 = _hi(off_h, stride, H, HO)
            for kj in range(KW):
                off_w = kj - padding
                ow0 = _lo(off_w, stride)
                ow1 = _hi(off_w, stride, W, WO)
                acc = 0
                for b in range(B):
                    for oh in range(oh0, oh1):
                        yp = &gout[b, co, oh, 0]
                        xp = &x[b, ci, oh * stride + off_h, 0]
                        for ow in range(ow0, ow1):
                            acc = acc + yp[ow] * xp[ow * stride + off_w]
                gw[co, ci, ki, kj] = acc
    return out
