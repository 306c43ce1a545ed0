# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3x3 stride-1 zero-padded convolution kernels (NHWC / HWIO).

float32 runs the register-blocked SIMD loops from ``_conv3x3.h``; output
channels are processed in blocks zero-padded to 8, 16, 32 or 64. float64 (used for
gradient checks) runs plain loops.
"""
import numpy as np

cdef extern from "_conv3x3.h" nogil:
    int dc_conv3x3_f32(const float *x, const float *k, float *y,
                       Py_ssize_t n, Py_ssize_t h, Py_ssize_t w, Py_ssize_t cin,
                       Py_ssize_t cout, const float *zeros)
    int dc_kgrad3x3_f32(const float *x, const float *dy, float *dk,
                        Py_ssize_t n, Py_ssize_t h, Py_ssize_t w, Py_ssize_t cin,
                        Py_ssize_t cout)

cdef void _conv(const double[:, :, :, ::1] x, const double[:, :, :, ::1] k,
                double[:, :, :, ::1] y) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t cin = x.shape[3], cout = k.shape[3]
    cdef Py_ssize_t b, i, j, ky, kx, yy, xx, c, o
    cdef double v
    cdef double *acc
    cdef const double *xr
    cdef const double *kr
    for b in range(n):
        for i in range(h):
            for j in range(w):
                acc = &y[b, i, j, 0]
                for ky in range(3):
                    yy = i + ky - 1
                    if yy < 0 or yy >= h:
                        continue
                    for kx in range(3):
                        xx = j + kx - 1
                        if xx < 0 or xx >= w:
                            continue
                        xr = &x[b, yy, xx, 0]
                        for c in range(cin):
                            v = xr[c]
                            kr = &k[ky, kx, c, 0]
                            for o in range(cout):
                                acc[o] += v * kr[o]


cdef void _kgrad(const double[:, :, :, ::1] x, const double[:, :, :, ::1] dy,
                 double[:, :, :, ::1] dk) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t cin = x.shape[3], cout = dy.shape[3]
    cdef Py_ssize_t b, i, j, ky, kx, yy, xx, c, o
    cdef double v
    cdef double *acc
    cdef const double *xr
    cdef const double *g
    for b in range(n):
        for i in range(h):
            for j in range(w):
                g = &dy[b, i, j, 0]
                for ky in range(3):
                    yy = i + ky - 1
                    if yy < 0 or yy >= h:
                        continue
                    for kx in range(3):
                        xx = j + kx - 1
                        if xx < 0 or xx >= w:
                            continue
                        xr = &x[b, yy, xx, 0]
                        for c in range(cin):
                            v = xr[c]
                            acc = &dk[ky, kx, c, 0]
                            for o in range(cout):
                                acc[o] += v * g[o]


def _prepare(*arrays):
    dtype = arrays[0].dtype
    if dtype != np.float32 and dtype != np.float64:
        raise TypeError(f"unsupported dtype {dtype}")
    return [np.ascontiguousarray(a, dtype=dtype) for a in arrays]


cdef int _fast_conv(float[:, :, :, ::1] x, float[:, :, :, ::1] k, float[:, :, :, ::1] y):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t cin = x.shape[3], cout = k.shape[3]
    cdef float[::1] zeros = np.zeros(max(cin, 1), dtype=np.float32)
    cdef int done
    with nogil:
        done = dc_conv3x3_f32(&x[0, 0, 0, 0], &k[0, 0, 0, 0], &y[0, 0, 0, 0],
                              n, h, w, cin, cout, &zeros[0])
    if not done:
        raise RuntimeError(f"no specialised kernel for {cout} output channels")
    return done


cdef int _fast_kgrad(float[:, :, :, ::1] x, float[:, :, :, ::1] dy, float[:, :, :, ::1] dk):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t cin = x.shape[3], cout = dy.shape[3]
    cdef int done
    with nogil:
        done = dc_kgrad3x3_f32(&x[0, 0, 0, 0], &dy[0, 0, 0, 0], &dk[0, 0, 0, 0],
                               n, h, w, cin, cout)
    if not done:
        raise RuntimeError(f"no specialised kernel for {cout} output channels")
    return done


_WIDTHS = (8, 16, 32, 64)


def _blocks(cout):
    """Output-channel blocks of at most 64, each zero-padded to a specialised width."""
    for o0 in range(0, cout, 64):
        o1 = min(cout, o0 + 64)
        yield o0, o1, next(v for v in _WIDTHS if v >= o1 - o0)


def conv3x3(x, kernel, bias=None):
    """Same-padded 3x3 convolution of NHWC ``x`` with an HWIO ``kernel``."""
    x, kernel = _prepare(x, kernel)
    n, h, w, cin = x.shape
    cout = kernel.shape[3]
    y = np.zeros((n, h, w, cout), dtype=x.dtype)
    if x.dtype == np.float64:
        _conv(x, kernel, y)
    elif cout in (8, 16, 32, 64):
        _fast_conv(x, kernel, y)
    else:
        for o0, o1, width in _blocks(cout):
            kb = np.zeros((3, 3, cin, width), dtype=np.float32)
            kb[..., :o1 - o0] = kernel[..., o0:o1]
            yb = np.zeros((n, h, w, width), dtype=np.float32)
            _fast_conv(x, kb, yb)
            y[..., o0:o1] = yb[..., :o1 - o0]
    if bias is not None:
        y += bias
    return y


def conv3x3_kernel_grad(x, dy):
    """Gradient of ``sum(dy * conv3x3(x, k))`` with respect to ``k``."""
    x, dy = _prepare(x, dy)
    n, h, w, cin = x.shape
    cout = dy.shape[3]
    dk = np.zeros((3, 3, cin, cout), dtype=x.dtype)
    if x.dtype == np.float64:
        _kgrad(x, dy, dk)
    elif cout in (8, 16, 32, 64):
        _fast_kgrad(x, dy, dk)
    else:
        for o0, o1, width in _blocks(cout):
            gb = np.zeros((n, h, w, width), dtype=np.float32)
            gb[..., :o1 - o0] = dy[..., o0:o1]
            kb = np.zeros((3, 3, cin, width), dtype=np.float32)
            _fast_kgrad(x, gb, kb)
            dk[..., o0:o1] = kb[..., :o1 - o0]
    return dk


# ------------------------------------------------------------- batch norm

ctypedef fused real:
    float
    double


cdef void _stats(const real[:, ::1] x, double[::1] mean, double[::1] var) noexcept nogil:
    cdef Py_ssize_t p, c, npix = x.shape[0], nc = x.shape[1]
    cdef double d
    for p in range(npix):
        for c in range(nc):
            mean[c] += x[p, c]
    for c in range(nc):
        mean[c] /= npix
    for p in range(npix):
        for c in range(nc):
            d = x[p, c] - mean[c]
            var[c] += d * d
    for c in range(nc):
        var[c] /= npix


def bn_stats(x2):
    """Per-channel mean and (biased) variance of a ``(pixels, channels)`` array."""
    x2 = np.ascontiguousarray(x2)
    mean = np.zeros(x2.shape[1])
    var = np.zeros(x2.shape[1])
    if x2.dtype == np.float32:
        _stats[float](x2, mean, var)
    else:
        _stats[double](x2, mean, var)
    return mean, var


cdef void _affine(const real[:, ::1] x, const real[::1] scale, const real[::1] shift,
                  real[:, ::1] y) noexcept nogil:
    cdef Py_ssize_t p, c, npix = x.shape[0], nc = x.shape[1]
    for p in range(npix):
        for c in range(nc):
            y[p, c] = x[p, c] * scale[c] + shift[c]


def bn_apply(x2, scale, shift):
    """``x * scale + shift`` per channel."""
    x2 = np.ascontiguousarray(x2)
    scale = np.ascontiguousarray(scale, dtype=x2.dtype)
    shift = np.ascontiguousarray(shift, dtype=x2.dtype)
    y = np.empty_like(x2)
    if x2.dtype == np.float32:
        _affine[float](x2, scale, shift, y)
    else:
        _affine[double](x2, scale, shift, y)
    return y


cdef void _gsums(const real[:, ::1] dy, const real[:, ::1] x, const double[::1] mean,
                 const double[::1] inv_std, double[::1] sdy, double[::1] sdyx) noexcept nogil:
    cdef Py_ssize_t p, c, npix = x.shape[0], nc = x.shape[1]
    cdef double g
    for p in range(npix):
        for c in range(nc):
            g = dy[p, c]
            sdy[c] += g
            sdyx[c] += g * (x[p, c] - mean[c])
    for c in range(nc):
        sdyx[c] *= inv_std[c]


def bn_grad_sums(dy2, x2, mean, inv_std):
    """Per-channel ``sum(dy)`` and ``sum(dy * x_hat)``."""
    dy2 = np.ascontiguousarray(dy2, dtype=x2.dtype)
    x2 = np.ascontiguousarray(x2)
    mean = np.ascontiguousarray(mean, dtype=np.float64)
    inv_std = np.ascontiguousarray(inv_std, dtype=np.float64)
    sdy = np.zeros(x2.shape[1])
    sdyx = np.zeros(x2.shape[1])
    if x2.dtype == np.float32:
        _gsums[float](dy2, x2, mean, inv_std, sdy, sdyx)
    else:
        _gsums[double](dy2, x2, mean, inv_std, sdy, sdyx)
    return sdy, sdyx


cdef void _igrad(const real[:, ::1] dy, const real[:, ::1] x, const double[::1] mean,
                 const double[::1] a, const double[::1] b, const double[::1] cc,
                 real[:, ::1] dx) noexcept nogil:
    # dx = a * dy + b + cc * (x - mean)
    cdef Py_ssize_t p, c, npix = x.shape[0], nc = x.shape[1]
    for p in range(npix):
        for c in range(nc):
            dx[p, c] = <real>(a[c] * dy[p, c] + b[c] + cc[c] * (x[p, c] - mean[c]))


def bn_input_grad(dy2, x2, mean, a, b, c):
    """Evaluate ``a*dy + b + c*(x - mean)`` per channel (BN input gradient)."""
    dy2 = np.ascontiguousarray(dy2, dtype=x2.dtype)
    x2 = np.ascontiguousarray(x2)
    args = [np.ascontiguousarray(v, dtype=np.float64) for v in (mean, a, b, c)]
    dx = np.empty_like(x2)
    if x2.dtype == np.float32:
        _igrad[float](dy2, x2, *args, dx)
    else:
        _igrad[double](dy2, x2, *args, dx)
    return dx
