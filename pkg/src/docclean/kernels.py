"""Hot-loop kernel selection.

The compiled Cython/C module is used when it imports; otherwise the numpy
implementation is used. Set ``DOCCLEAN_BACKEND=python`` to force the
fallback (``compiled`` turns a missing extension into an ImportError).
"""
import os

from . import _pykernels

_requested = os.environ.get("DOCCLEAN_BACKEND", "auto").lower()
if _requested not in ("auto", "python", "compiled"):
    raise ImportError(f"DOCCLEAN_BACKEND must be auto, python or compiled, not {_requested!r}")

_ckernels = None
if _requested != "python":
    try:
        from . import _ckernels
    except ImportError:
        if _requested == "compiled":
            raise

BACKEND = "compiled" if _ckernels is not None else "python"
_impl = _ckernels if _ckernels is not None else _pykernels

conv3x3 = _impl.conv3x3
conv3x3_kernel_grad = _impl.conv3x3_kernel_grad
bn_stats = _impl.bn_stats
bn_apply = _impl.bn_apply
bn_grad_sums = _impl.bn_grad_sums
bn_input_grad = _impl.bn_input_grad


def flip_transpose(kernel):
    """Kernel whose convolution applies the transpose of ``kernel``'s.

    ``conv3x3(dy, flip_transpose(k))`` is the input gradient of ``conv3x3(x, k)``.
    """
    return kernel[::-1, ::-1].transpose(0, 1, 3, 2)


__all__ = [
    "BACKEND", "conv3x3", "conv3x3_kernel_grad", "flip_transpose",
    "bn_stats", "bn_apply", "bn_grad_sums", "bn_input_grad",
]
