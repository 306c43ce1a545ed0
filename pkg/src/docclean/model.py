"""M-16 / M-32 / M-64 encoder-decoder networks.

The encoder is a stack of conv-BN-ReLU6 blocks followed by five residual
blocks at the network's maximum width; the decoder is five convolutions
whose first layers receive additive skip connections from the
shape-matched encoder outputs, ending in a sigmoid head with bias.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, nn
from .errors import ConfigurationError, ManifestError

VARIANTS = {"M16": 16, "M32": 32, "M64": 64}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "M16"
    out_channels: int = 1
    input_size: int = 256

    def __post_init__(self):
        v = self.variant.upper().replace("-", "")
        if v not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of M16, M32, M64")
        object.__setattr__(self, "variant", v)
        if self.out_channels not in (1, 3):
            raise ConfigurationError(f"out_channels must be 1 or 3, got {self.out_channels}")
        if self.input_size < 1:
            raise ConfigurationError("input_size must be positive")

    @property
    def width(self):
        return VARIANTS[self.variant]


@dataclass(frozen=True)
class ConvSpec:
    name: str
    c_in: int
    c_out: int
    bn: bool = True
    act: str = "relu6"
    bias: bool = False
    skip_from: str | None = None


@dataclass(frozen=True)
class ResidualSpec:
    name: str
    channels: int


@dataclass
class LayerPlan:
    config: ModelConfig
    encoder: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    decoder: list = field(default_factory=list)

    def layers(self):
        return [*self.encoder, *self.residual, *self.decoder]

    def convs(self):
        """Every convolution as ``(name, c_in, c_out, bn, bias)``."""
        out = []
        for spec in self.layers():
            if isinstance(spec, ResidualSpec):
                for i in (1, 2):
                    out.append((f"{spec.name}/conv{i}", spec.channels, spec.channels, True, False))
            else:
                out.append((spec.name, spec.c_in, spec.c_out, spec.bn, spec.bias))
        return out


def plan_model(cfg: ModelConfig) -> LayerPlan:
    """Derive the layer layout for a variant.

    Encoder widths run 16, 32, 64 up to the variant width. Decoder layers
    mirror the encoder with skip additions, then pad out to five convs at
    width 16 before the output head.
    """
    width = cfg.width
    enc_widths = [c for c in (16, 32, 64) if c <= width]
    plan = LayerPlan(cfg)
    c = 3
    for i, w in enumerate(enc_widths, 1):
        plan.encoder.append(ConvSpec(f"enc{i}", c, w))
        c = w
    for i in range(1, 6):
        plan.residual.append(ResidualSpec(f"res{i}", width))
    # decoder: mirror encoder widths with skips, widest first
    dec = []
    for i, w in enumerate(reversed(enc_widths)):
        enc_idx = len(enc_widths) - i
        dec.append((w, f"enc{enc_idx}"))
    while len(dec) < 4:
        dec.append((16, None))
    for i, (w, skip) in enumerate(dec, 1):
        plan.decoder.append(ConvSpec(f"dec{i}", c, w, skip_from=skip))
        c = w
    plan.decoder.append(ConvSpec("head", c, cfg.out_channels, bn=False, act="sigmoid", bias=True))
    _check_skips(plan)
    return plan


def _check_skips(plan):
    enc_out = {s.name: s.c_out for s in plan.encoder}
    names = [s.name for s in plan.layers()]
    if len(plan.residual) != 5:
        raise ConfigurationError("exactly five residual blocks are required")
    if len(set(names)) != len(names):
        raise ConfigurationError("duplicate layer names in plan")
    for s in plan.decoder:
        if s.skip_from is None:
            continue
        if s.skip_from not in enc_out:
            raise ConfigurationError(f"{s.name}: skip source {s.skip_from} is not an encoder layer")
        if enc_out[s.skip_from] != s.c_out:
            raise ConfigurationError(
                f"{s.name}: skip from {s.skip_from} joins {enc_out[s.skip_from]} channels to {s.c_out}"
            )
    if plan.decoder[-1].act != "sigmoid":
        raise ConfigurationError("final layer must use a sigmoid activation")


def count_params(plan: LayerPlan) -> int:
    """Trainable parameter count: conv kernels, BN gamma/beta, output bias."""
    total = 0
    for _, c_in, c_out, bn, bias in plan.convs():
        total += 9 * c_in * c_out
        if bn:
            total += 2 * c_out
        if bias:
            total += c_out
    return total


def count_mult_adds(plan: LayerPlan, h: int, w: int) -> int:
    """Multiply-accumulates of all convolutions at an ``h`` x ``w`` input."""
    return sum(9 * c_in * c_out for _, c_in, c_out, _, _ in plan.convs()) * h * w


def layer_breakdown(plan: LayerPlan, h: int, w: int):
    rows = []
    for name, c_in, c_out, bn, bias in plan.convs():
        params = 9 * c_in * c_out + (2 * c_out if bn else 0) + (c_out if bias else 0)
        rows.append({
            "layer": name, "c_in": c_in, "c_out": c_out,
            "params": params, "mult_adds": 9 * c_in * c_out * h * w,
        })
    return rows


class ResidualBlock(nn.Module):
    """conv-BN-ReLU6-conv-BN, identity add, ReLU6."""

    def __init__(self, channels, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = self.add_child("conv1", nn.Conv2d(channels, channels, rng=rng, dtype=dtype))
        self.bn1 = self.add_child("bn1", nn.BatchNorm(channels, dtype=dtype))
        self.conv2 = self.add_child("conv2", nn.Conv2d(channels, channels, rng=rng, dtype=dtype))
        self.bn2 = self.add_child("bn2", nn.BatchNorm(channels, dtype=dtype))
        self._a = self._s = None

    def forward(self, x):
        self._a = self.bn1(self.conv1(x))
        h = self.bn2(self.conv2(nn.relu6(self._a)))
        self._s = h + x
        return nn.relu6(self._s)

    def backward(self, dy):
        ds = nn.relu6_backward(self._s, dy)
        dh = self.conv2.backward(self.bn2.backward(ds))
        dx = self.conv1.backward(self.bn1.backward(nn.relu6_backward(self._a, dh)))
        self._a = self._s = None
        return dx + ds


class OutputHead(nn.Module):
    def __init__(self, c_in, c_out, rng, dtype=np.float32):
        super().__init__()
        self.conv = self.add_child("conv", nn.Conv2d(c_in, c_out, bias=True, rng=rng, dtype=dtype))
        self._y = None

    def forward(self, x):
        self._y = nn.sigmoid(self.conv(x))
        return self._y

    def backward(self, dy, input_grad=True):
        d = nn.sigmoid_backward(self._y, dy)
        self._y = None
        return self.conv.backward(d, input_grad=input_grad)


class DocCleanNet(nn.Module):
    """A built M-x network. Input is NHWC RGB in [0, 1]."""

    def __init__(self, plan: LayerPlan, seed=0, dtype=np.float32):
        super().__init__()
        self.plan = plan
        self.config = plan.config
        rng = np.random.default_rng(seed)
        self.blocks = []
        for spec in plan.layers():
            if isinstance(spec, ResidualSpec):
                block = ResidualBlock(spec.channels, rng, dtype)
            elif spec.act == "sigmoid":
                block = OutputHead(spec.c_in, spec.c_out, rng, dtype)
            else:
                block = nn.ConvBNReLU6(spec.c_in, spec.c_out, rng=rng, dtype=dtype)
            self.add_child(spec.name, block)
            self.blocks.append((spec, block))

    def forward(self, x):
        x = np.asarray(x)
        nn._check_nhwc(x)
        if x.shape[3] != 3:
            raise ConfigurationError(f"model expects 3-channel RGB input, got {x.shape[3]} channels")
        dtype = self.blocks[0][1].conv.kernel.value.dtype
        h = x.astype(dtype, copy=False)
        saved = {}
        for spec, block in self.blocks:
            h = block(h)
            if isinstance(spec, ConvSpec) and spec.name.startswith("enc"):
                saved[spec.name] = h
            if isinstance(spec, ConvSpec) and spec.skip_from is not None:
                h = h + saved[spec.skip_from]
        return h

    def backward(self, dy, input_grad=True):
        """Backpropagate ``dy`` (gradient w.r.t. the output).

        Returns the input gradient, or None when ``input_grad`` is False.
        """
        skip_grads = {}
        d = dy
        for idx in range(len(self.blocks) - 1, -1, -1):
            spec, block = self.blocks[idx]
            if isinstance(spec, ConvSpec) and spec.skip_from is not None:
                skip_grads[spec.skip_from] = skip_grads.get(spec.skip_from, 0) + d
            if isinstance(spec, ConvSpec) and spec.name in skip_grads:
                d = d + skip_grads.pop(spec.name)
            if idx == 0:
                d = block.backward(d, input_grad=input_grad)
            else:
                d = block.backward(d)
        return d

    def predict(self, x, batch_size=4):
        """Inference-mode forward in batches; restores the previous mode."""
        was_training = self.training
        self.eval()
        try:
            outs = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        finally:
            self.train(was_training)
        return np.concatenate(outs, axis=0)

    def num_parameters(self):
        return sum(p.value.size for p in self.parameters())


def build_model(cfg: ModelConfig, seed=0, dtype=np.float32) -> DocCleanNet:
    return DocCleanNet(plan_model(cfg), seed=seed, dtype=dtype)


def model_meta(model: DocCleanNet, **extra):
    cfg = model.config
    meta = {
        "kind": "model",
        "variant": cfg.variant,
        "out_channels": cfg.out_channels,
        "input_size": cfg.input_size,
    }
    meta.update(extra)
    return meta


def save_checkpoint(model: DocCleanNet, path, **metadata):
    """Write parameters and BN running statistics; returns the file size."""
    return checkpoint.save(path, model.state_dict(), model_meta(model, **metadata))


def load_checkpoint(path, config: ModelConfig | None = None):
    """Rebuild a model from a checkpoint.

    With ``config`` the stored tensors must fit that architecture
    (:class:`ShapeMismatchError` otherwise); without it the stored
    configuration is used. Returns ``(model, metadata)``.
    """
    meta, tensors = checkpoint.load(path)
    if meta.get("kind") != "model":
        raise ManifestError(f"{path} is not a model checkpoint (kind={meta.get('kind')!r})")
    if config is None:
        try:
            config = ModelConfig(meta["variant"], int(meta["out_channels"]), int(meta.get("input_size", 256)))
        except (KeyError, ValueError, ConfigurationError) as exc:
            raise ManifestError(f"invalid model configuration in manifest: {exc}") from None
    model = build_model(config)
    state = model.state_dict()
    checkpoint.match_tensors(tensors, {k: v.shape for k, v in state.items()})
    model.load_state_dict(tensors)
    return model, meta
