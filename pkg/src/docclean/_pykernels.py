"""Pure numpy versions of the 3x3 convolution kernels (im2col + GEMM)."""
import numpy as np

# upper bound on one im2col buffer
_MAX_COLS_BYTES = 128 * 1024 * 1024


def im2col3x3(x):
    """Unfold an NHWC array into ``(n*h*w, 9*c)`` zero-padded 3x3 patches."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky * 3 + kx, :] = xp[:, ky:ky + h, kx:kx + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _chunks(x):
    n, h, w, c = x.shape
    step = max(1, _MAX_COLS_BYTES // max(h * w * 9 * c * x.dtype.itemsize, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def conv3x3(x, kernel, bias=None):
    """Same-padded 3x3 convolution of NHWC ``x`` with an HWIO ``kernel``."""
    x = np.ascontiguousarray(x)
    n, h, w, _ = x.shape
    cout = kernel.shape[3]
    k2 = kernel.reshape(-1, cout).astype(x.dtype, copy=False)
    y = np.empty((n, h, w, cout), dtype=x.dtype)
    for sl in _chunks(x):
        y[sl] = (im2col3x3(x[sl]) @ k2).reshape(-1, h, w, cout)
    if bias is not None:
        y += bias
    return y


def conv3x3_kernel_grad(x, dy):
    """Gradient of ``sum(dy * conv3x3(x, k))`` with respect to ``k``."""
    x = np.ascontiguousarray(x)
    cin, cout = x.shape[3], dy.shape[3]
    dk = np.zeros((9 * cin, cout), dtype=x.dtype)
    for sl in _chunks(x):
        dk += im2col3x3(x[sl]).T @ dy[sl].reshape(-1, cout).astype(x.dtype, copy=False)
    return dk.reshape(3, 3, cin, cout)


def bn_stats(x2):
    """Per-channel mean and (biased) variance of a ``(pixels, channels)`` array."""
    x64 = x2.astype(np.float64)
    mean = x64.mean(axis=0)
    var = ((x64 - mean) ** 2).mean(axis=0)
    return mean, var


def bn_apply(x2, scale, shift):
    return x2 * scale.astype(x2.dtype) + shift.astype(x2.dtype)


def bn_grad_sums(dy2, x2, mean, inv_std):
    dy64 = dy2.astype(np.float64)
    sdy = dy64.sum(axis=0)
    sdyx = (dy64 * (x2 - mean)).sum(axis=0) * inv_std
    return sdy, sdyx


def bn_input_grad(dy2, x2, mean, a, b, c):
    return (a * dy2 + b + c * (x2 - mean)).astype(x2.dtype)
