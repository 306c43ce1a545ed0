"""Composite pixel + feature-reconstruction + style loss.

``composite = w1 * l1 + w2 * feature + w3 * style`` where ``l1`` is the mean
absolute pixel error (YCbCr for colour, direct for single-channel),
``feature`` the normalized L1 distance between conv1-2 activations of a
frozen VGG-19, and ``style`` the summed entrywise L1 distance between Gram
matrices of five VGG-19 layers.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import checkpoint, nn
from .errors import CheckpointError, ConfigurationError, MissingTensorError, ShapeMismatchError

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])

# rows: Y, Cb, Cr (full-range BT.601, inputs in [0, 1])
_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCBCR_OFFSET = np.array([0.0, 0.5, 0.5])

VGG19_CONVS = (
    "conv1-1", "conv1-2",
    "conv2-1", "conv2-2",
    "conv3-1", "conv3-2", "conv3-3", "conv3-4",
    "conv4-1", "conv4-2", "conv4-3", "conv4-4",
    "conv5-1", "conv5-2", "conv5-3", "conv5-4",
)


@dataclass(frozen=True)
class LossWeights:
    pixel: float = 10.0
    feature: float = 0.1
    style: float = 10.0

    def __post_init__(self):
        for name in ("pixel", "feature", "style"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"loss weight {name} must be finite and >= 0, got {v}")

    def as_tuple(self):
        return (self.pixel, self.feature, self.style)


@dataclass(frozen=True)
class FeatureTaps:
    content: tuple = ("conv1-2",)
    style: tuple = ("conv1-1", "conv2-1", "conv3-1", "conv4-1", "conv5-1")

    def __post_init__(self):
        if not self.style:
            raise ConfigurationError("at least one style layer is required")
        for name in (*self.content, *self.style):
            if name not in VGG19_CONVS:
                raise ConfigurationError(f"unknown VGG-19 layer {name!r}")

    def layers(self):
        return sorted(set(self.content) | set(self.style), key=VGG19_CONVS.index)


class LossTerms(NamedTuple):
    total: float
    pixel: float
    feature: float
    style: float


# ------------------------------------------------------------- colour / pixel


def rgb_to_ycbcr(x):
    """Full-range BT.601 RGB -> YCbCr on the last axis, values in [0, 1]."""
    x = np.asarray(x)
    if x.shape[-1] != 3:
        raise ConfigurationError(f"rgb_to_ycbcr needs 3 channels, got {x.shape[-1]}")
    return x @ _YCBCR.T.astype(x.dtype) + _YCBCR_OFFSET.astype(x.dtype)


def _check_pair(pred, target):
    if pred.shape != target.shape:
        raise ConfigurationError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.shape[-1] not in (1, 3):
        raise ConfigurationError(f"images must have 1 or 3 channels, got {pred.shape[-1]}")


def l1_pixel_loss(pred, target):
    """Mean absolute error; 3-channel images are compared in YCbCr."""
    return _l1(pred, target, grad=False)[0]


def _l1(pred, target, grad):
    _check_pair(pred, target)
    if pred.shape[-1] == 3:
        diff = rgb_to_ycbcr(pred) - rgb_to_ycbcr(target)
    else:
        diff = pred - target
    value = float(np.abs(diff).mean())
    if not grad:
        return value, None
    g = np.sign(diff) / diff.size
    if pred.shape[-1] == 3:
        g = g @ _YCBCR.astype(g.dtype)
    return value, g.astype(pred.dtype)


# ------------------------------------------------------------------- gram


def gram(features):
    """Channel Gram matrix normalized by ``h * w * c``.

    ``features`` is ``(h, w, c)`` for one image or ``(n, h, w, c)`` for a
    batch (one matrix per sample).
    """
    f = np.asarray(features)
    if f.ndim == 3:
        return gram(f[None])[0]
    n, h, w, c = f.shape
    flat = f.reshape(n, h * w, c)
    return np.einsum("npc,npd->ncd", flat, flat) / (h * w * c)


# ------------------------------------------------------------ extractor


class FeatureExtractor(nn.Module):
    """Frozen VGG-19 convolution trunk (conv + ReLU, 2x2 max pools).

    Inputs are ``(n, h, w, 1 or 3)`` images in [0, 1]; single-channel
    images are replicated to RGB, then normalized with the ImageNet
    statistics. Tap activations are taken after the ReLU of the named conv.
    """

    def __init__(self, layers, dtype=np.float32):
        super().__init__()
        self.convs = []
        for name, kernel, bias in layers:
            conv = nn.Conv2d(kernel.shape[2], kernel.shape[3], bias=True, trainable=False)
            conv.kernel.value = np.asarray(kernel, dtype=dtype)
            conv.bias.value = np.asarray(bias, dtype=dtype)
            self.add_child(name, conv)
            self.convs.append((name, conv))
        self.mean = IMAGENET_MEAN
        self.std = IMAGENET_STD
        self._trace = None

    @property
    def names(self):
        return [name for name, _ in self.convs]

    @property
    def dtype(self):
        return self.convs[0][1].kernel.value.dtype

    def _preprocess(self, images):
        x = np.asarray(images, dtype=self.dtype)
        nn._check_nhwc(x)
        c = x.shape[3]
        if c == 1:
            x = np.repeat(x, 3, axis=3)
        elif c != 3:
            raise ConfigurationError(f"extractor input needs 1 or 3 channels, got {c}")
        return (x - self.mean.astype(x.dtype)) / self.std.astype(x.dtype), c

    def features(self, images, layers, keep=False):
        """Activations ``{name: array}`` for each requested layer.

        With ``keep=True`` intermediate values are retained for :meth:`backward`.
        """
        missing = [n for n in layers if n not in self.names]
        if missing:
            raise ConfigurationError(f"extractor has no layers {missing}")
        last = max(VGG19_CONVS.index(n) for n in layers)
        x, in_channels = self._preprocess(images)
        out = {}
        trace = []
        for name, conv in self.convs:
            idx = VGG19_CONVS.index(name)
            if idx > last:
                break
            block = name.split("-")[0]
            if trace and trace[-1][0] != "start" and trace[-1][1] != block:
                pooled, arg = nn.max_pool2x2(x)
                trace.append(("pool", block, x.shape, arg))
                x = pooled
            pre = conv.forward(x) if keep else nn.conv2d(x, conv.kernel.value, conv.bias.value)
            x = nn.relu(pre)
            trace.append(("conv", block, name, pre))
            if name in layers:
                out[name] = x
        self._trace = (trace, in_channels) if keep else None
        return out

    def backward(self, tap_grads):
        """Input-image gradient given ``{layer: d(activation)}`` from the last kept pass."""
        if self._trace is None:
            raise RuntimeError("backward() needs a preceding features(..., keep=True)")
        trace, in_channels = self._trace
        convs = dict(self.convs)
        d = None
        for entry in reversed(trace):
            if entry[0] == "pool":
                _, _, shape, arg = entry
                d = nn.max_pool2x2_backward(shape, arg, d)
                continue
            _, _, name, pre = entry
            g = tap_grads.get(name)
            if g is not None:
                d = g if d is None else d + g
            if d is None:
                # nothing flows back from deeper layers yet
                continue
            d = convs[name].backward(nn.relu_backward(pre, d))
        self._trace = None
        d = d / self.std.astype(d.dtype)
        if in_channels == 1:
            d = d.sum(axis=3, keepdims=True)
        return d


def extractor_from_tensors(tensors, taps: FeatureTaps | None = None, prefix="vgg19/"):
    """Build an extractor from ``{vgg19/convK-L/kernel|bias: array}``.

    Every conv up to the deepest tap must be present; widths are read from
    the kernels, so reduced-width test networks load the same way.
    """
    taps = taps or FeatureTaps()
    last = max(VGG19_CONVS.index(n) for n in taps.layers())
    needed = VGG19_CONVS[:last + 1]
    missing = [
        f"{prefix}{name}/{part}"
        for name in needed for part in ("kernel", "bias")
        if f"{prefix}{name}/{part}" not in tensors
    ]
    if missing:
        raise MissingTensorError(missing)
    layers = []
    c_prev = 3
    for name in needed:
        k = tensors[f"{prefix}{name}/kernel"]
        b = tensors[f"{prefix}{name}/bias"]
        if k.ndim != 4 or k.shape[:2] != (3, 3) or k.shape[2] != c_prev or b.shape != (k.shape[3],):
            raise ShapeMismatchError(
                f"{prefix}{name}: kernel {k.shape} / bias {b.shape} do not chain from {c_prev} channels"
            )
        layers.append((name, k, b))
        c_prev = k.shape[3]
    return FeatureExtractor(layers)


def load_feature_extractor(path, taps: FeatureTaps | None = None):
    """Load frozen VGG-19 weights from a docclean container."""
    meta, tensors = checkpoint.load(path)
    return extractor_from_tensors(tensors, taps)


def random_vgg19_tensors(widths=(4, 4, 4, 4, 4), seed=0):
    """A reduced-width VGG-19 weight set (per-block channel widths) for tests and smoke runs."""
    rng = np.random.default_rng(seed)
    tensors = {}
    c_prev = 3
    for name in VGG19_CONVS:
        block = int(name[4]) - 1
        c = widths[block]
        fan_in = 9 * c_prev
        tensors[f"vgg19/{name}/kernel"] = (rng.standard_normal((3, 3, c_prev, c)) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        tensors[f"vgg19/{name}/bias"] = (rng.standard_normal(c) * 0.05).astype(np.float32)
        c_prev = c
    return tensors


# ---------------------------------------------------------------- losses


def _activations_pair(pred, target, fx, layers):
    tgt = fx.features(target, layers)
    prd = fx.features(pred, layers)
    return prd, tgt


def feature_loss(pred, target, fx: FeatureExtractor, taps: FeatureTaps | None = None):
    """Mean over content taps of ``|phi(pred) - phi(target)|_1 / (h*w*c)``, batch-averaged."""
    taps = taps or FeatureTaps()
    _check_pair(pred, target)
    prd, tgt = _activations_pair(pred, target, fx, list(taps.content))
    return float(sum(np.abs(prd[n] - tgt[n]).mean() for n in taps.content))


def style_loss(pred, target, fx: FeatureExtractor, taps: FeatureTaps | None = None):
    """Sum over style taps of the entrywise L1 Gram distance, batch-averaged."""
    taps = taps or FeatureTaps()
    _check_pair(pred, target)
    prd, tgt = _activations_pair(pred, target, fx, list(taps.style))
    n = pred.shape[0]
    return float(sum(np.abs(gram(prd[j]) - gram(tgt[j])).sum() for j in taps.style) / n)


def composite_loss(pred, target, weights: LossWeights | None = None,
                   fx: FeatureExtractor | None = None, taps: FeatureTaps | None = None):
    """Weighted loss terms (no gradient)."""
    return composite_loss_and_grad(pred, target, weights, fx, taps, grad=False)[0]


def composite_loss_and_grad(pred, target, weights: LossWeights | None = None,
                            fx: FeatureExtractor | None = None, taps: FeatureTaps | None = None,
                            grad=True):
    """Return ``(LossTerms, d total / d pred)``.

    When both perceptual weights are zero the extractor is not needed
    (``fx`` may be None) and those terms are reported as 0.
    """
    weights = weights or LossWeights()
    taps = taps or FeatureTaps()
    pred = np.asarray(pred)
    target = np.asarray(target)
    _check_pair(pred, target)
    l1, g = _l1(pred, target, grad)
    total_grad = weights.pixel * g if grad else None
    l2 = l3 = 0.0
    if weights.feature > 0 or weights.style > 0:
        if fx is None:
            raise ConfigurationError("perceptual terms need a feature extractor (weights missing)")
        layers = taps.layers()
        tgt = fx.features(target, layers)
        prd = fx.features(pred, layers, keep=grad)
        tap_grads = {}
        n = pred.shape[0]
        for name in taps.content:
            diff = prd[name] - tgt[name]
            l2 += float(np.abs(diff).mean())
            if grad:
                tap_grads[name] = tap_grads.get(name, 0) + weights.feature * np.sign(diff) / diff.size
        for name in taps.style:
            a = prd[name]
            _, h, w, c = a.shape
            g_pred = gram(a)
            s = np.sign(g_pred - gram(tgt[name]))
            l3 += float(np.abs(s * (g_pred - gram(tgt[name]))).sum() / n)
            if grad:
                flat = a.reshape(n, h * w, c)
                da = np.einsum("npc,ncd->npd", flat, s + s.transpose(0, 2, 1)) / (h * w * c * n)
                tap_grads[name] = tap_grads.get(name, 0) + weights.style * da.reshape(a.shape)
        if grad:
            total_grad = total_grad + fx.backward(tap_grads).astype(pred.dtype)
    total = weights.pixel * l1 + weights.feature * l2 + weights.style * l3
    return LossTerms(float(total), l1, l2, l3), total_grad


# -------------------------------------------------------- weight import

_TORCH_KEY = re.compile(r"^(?:.*\bfeatures\.)?(\d+)\.(weight|bias)$")
_KERAS_KEY = re.compile(r"block(\d)_conv(\d)(?:/[^/]*)*?/(kernel|bias)(?::0)?$")
_KERAS3_KEY = re.compile(r"(?:^|/)conv2d(?:_(\d+))?/vars/([01])$")
_OWN_KEY = re.compile(r"^vgg19/(conv\d-\d)/(kernel|bias)$")

# caffe-style preprocessing used by the Keras weights: BGR, 0..255, mean-subtracted
_CAFFE_MEAN_BGR = np.array([103.939, 116.779, 123.68])


def _read_source(path):
    path = str(path)
    if path.endswith(".npz"):
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    if path.endswith((".h5", ".hdf5")):
        import h5py

        out = {}
        with h5py.File(path, "r") as f:
            f.visititems(lambda name, obj: out.__setitem__(name, obj[()]) if isinstance(obj, h5py.Dataset) else None)
        return out
    if path.endswith((".pth", ".pt")):
        import torch

        state = torch.load(path, map_location="cpu")
        if hasattr(state, "state_dict"):
            state = state.state_dict()
        return {k: v.detach().cpu().numpy() for k, v in state.items()}
    if path.endswith(".ckpt"):
        return dict(checkpoint.load(path)[1])
    raise CheckpointError(f"unrecognized weight file type: {path}")


def convert_vgg19(raw):
    """Map a published VGG-19 weight dump to ``vgg19/convK-L/kernel|bias`` tensors.

    Recognized layouts:

    * torchvision: ``features.N.weight`` or bare ``N.weight``; OIHW; RGB
      input normalized by the ImageNet mean/std.
    * Keras: ``blockB_convC/kernel`` (or ``conv2d_N/vars/i`` in Keras 3
      files); HWIO; caffe preprocessing (BGR, 0..255, mean-subtracted).
    * this package's own ``vgg19/...`` names.

    For Keras weights the caffe preprocessing is folded into conv1-1 so all
    layouts share one input convention. The fold is exact except at the
    one-pixel border, where zero padding differs between the conventions.
    """
    own = {k: v for k, v in raw.items() if _OWN_KEY.match(k)}
    if own:
        return {k: np.asarray(v, np.float32) for k, v in own.items()}
    torch_keys = {}
    for k, v in raw.items():
        m = _TORCH_KEY.search(k)
        if m:
            torch_keys.setdefault(int(m.group(1)), {})[m.group(2)] = np.asarray(v)
    if torch_keys:
        out = {}
        conv_ids = sorted(i for i, parts in torch_keys.items() if parts.get("weight") is not None and np.ndim(parts["weight"]) == 4)
        for name, idx in zip(VGG19_CONVS, conv_ids):
            w = torch_keys[idx]["weight"]
            out[f"vgg19/{name}/kernel"] = np.ascontiguousarray(w.transpose(2, 3, 1, 0), dtype=np.float32)
            out[f"vgg19/{name}/bias"] = np.asarray(torch_keys[idx]["bias"], np.float32)
        return out
    keras = {}
    for k, v in raw.items():
        m = _KERAS_KEY.search(k)
        if m:
            keras[(f"conv{m.group(1)}-{m.group(2)}", m.group(3))] = np.asarray(v, np.float64)
    if not keras:
        # Keras 3 weight files name layers conv2d, conv2d_1, ... in build order
        numbered = {}
        for k, v in raw.items():
            m = _KERAS3_KEY.search(k)
            if m:
                numbered.setdefault(int(m.group(1) or 0), {})[("kernel", "bias")[int(m.group(2))]] = v
        for name, idx in zip(VGG19_CONVS, sorted(numbered)):
            for part, v in numbered[idx].items():
                keras[(name, part)] = np.asarray(v, np.float64)
    if not keras:
        raise CheckpointError("no VGG-19 convolution weights recognized in source")
    out = {}
    for (name, part), v in keras.items():
        out[f"vgg19/{name}/{part}"] = v
    if ("conv1-1", "kernel") in keras:
        k = keras[("conv1-1", "kernel")]
        b = keras.get(("conv1-1", "bias"), np.zeros(k.shape[3]))
        rgb = k[:, :, ::-1, :]
        scale = 255.0 * IMAGENET_STD
        offset = 255.0 * IMAGENET_MEAN - _CAFFE_MEAN_BGR[::-1]
        out["vgg19/conv1-1/kernel"] = rgb * scale[None, None, :, None]
        out["vgg19/conv1-1/bias"] = b + np.einsum("hwco,c->o", rgb, offset)
    return {k: np.asarray(v, np.float32) for k, v in out.items()}


def import_weights(src, dst, taps: FeatureTaps | None = None):
    """Convert ``src`` into a docclean container at ``dst``; returns tensor count.

    The result is validated by building an extractor from it.
    """
    tensors = convert_vgg19(_read_source(src))
    extractor_from_tensors(tensors, taps)
    ordered = {f"vgg19/{n}/{p}": tensors[f"vgg19/{n}/{p}"]
               for n in VGG19_CONVS for p in ("kernel", "bias") if f"vgg19/{n}/{p}" in tensors}
    checkpoint.save(dst, ordered, {"kind": "feature_extractor", "network": "vgg19", "source": str(src)})
    return len(ordered)
