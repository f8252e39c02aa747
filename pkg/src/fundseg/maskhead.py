"""Residual encoder-decoder mask head.

Layout for ``blocks`` = B and channel widths C[0..B-1]::

    encoder block b:  conv1 (3x3)  -> conv2 (3x3)  -> down (3x3, stride 2)
    decoder block b:  up (3x3 transposed, stride 2) -> deconv2 -> deconv1
    head:             1x1 conv per class + sigmoid

Every encoder layer has a mirror transposed-conv layer in the decoder, whose
output has the shape of the encoder layer's input. Skip additions happen
before the ReLU:

* T1: block input -> conv2 output (inside each encoder block)
* T2: every encoder layer output -> decoder layer output of the same shape
* T3: encoder block output (conv2) -> mirror decoder block output (deconv1)

A learned 1x1 projection is inserted wherever the channel counts at a
junction differ.
"""

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DimensionError, FormatError


class SkipType(enum.Enum):
    T1 = 1
    T2 = 2
    T3 = 3

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ConfigurationError(f"unknown skip type {value!r}; expected t1, t2 or t3") from None


@dataclass(frozen=True)
class MaskHeadConfig:
    input_size: int = 64
    in_channels: int = 1
    blocks: int = 3
    channels: tuple = (16, 32, 64)
    kernel_size: int = 3
    skip_type: SkipType = SkipType.T3
    classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "skip_type", SkipType.parse(self.skip_type))
        self.validate()

    def validate(self):
        if self.blocks < 1:
            raise ConfigurationError(f"blocks must be >= 1, got {self.blocks}")
        if len(self.channels) != self.blocks:
            raise ConfigurationError(
                f"channel list length {len(self.channels)} must equal blocks {self.blocks}")
        if any(c < 1 for c in self.channels) or self.in_channels < 1 or self.classes < 1:
            raise ConfigurationError("channel counts and classes must be positive")
        size = self.input_size
        if size < 1 or size & (size - 1):
            raise ConfigurationError(f"input size must be a power of two, got {size}")
        if size % (2 ** self.blocks):
            raise ConfigurationError(
                f"input size {size} not divisible by 2^blocks = {2 ** self.blocks}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {self.kernel_size}")


@dataclass
class Layer:
    name: str
    kind: str  # "conv" | "deconv" | "proj" | "head"
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    output_padding: int = 0


@dataclass
class MaskHeadModel:
    config: MaskHeadConfig
    layers: dict = field(default_factory=dict)

    def parameters(self):
        """Weights and biases in declaration order."""
        out = []
        for layer in self.layers.values():
            out.extend((layer.weight, layer.bias))
        return out

    def encoder_layers(self):
        return [l for l in self.layers.values() if l.kind == "conv"]

    def decoder_layers(self):
        return [l for l in self.layers.values() if l.kind == "deconv"]

    def with_parameters(self, tensors):
        """Shallow copy whose parameters are replaced, in declaration order."""
        tensors = list(tensors)
        if len(tensors) != 2 * len(self.layers):
            raise ContractError(f"expected {2 * len(self.layers)} tensors, got {len(tensors)}")
        layers = {}
        for i, (name, l) in enumerate(self.layers.items()):
            w, b = tensors[2 * i], tensors[2 * i + 1]
            if w.shape != l.weight.shape or b.shape != l.bias.shape:
                raise DimensionError(f"parameter shapes for {name} do not match")
            layers[name] = Layer(name, l.kind, w, b, l.stride, l.padding, l.output_padding)
        return MaskHeadModel(self.config, layers)

    def n_parameters(self):
        return sum(t.size for t in self.parameters())


def _skip_projections(config):
    """(name, c_in, c_out) for every 1x1 projection the skip topology needs."""
    c = config.channels
    cin = [config.in_channels] + list(c[:-1])
    projs = []
    for b in range(config.blocks):
        if config.skip_type is SkipType.T1 and cin[b] != c[b]:
            projs.append((f"skip{b}.proj", cin[b], c[b]))
        if config.skip_type is SkipType.T3:
            dec_out = cin[b] if b > 0 else c[0]
            if c[b] != dec_out:
                projs.append((f"skip{b}.proj", c[b], dec_out))
    return projs


def _layer_specs(config):
    k = config.kernel_size
    p = k // 2
    c = config.channels
    cin = [config.in_channels] + list(c[:-1])
    specs = []
    for b in range(config.blocks):
        specs.append((f"enc{b}.conv1", "conv", (c[b], cin[b], k, k), 1, p, 0))
        specs.append((f"enc{b}.conv2", "conv", (c[b], c[b], k, k), 1, p, 0))
        specs.append((f"enc{b}.down", "conv", (c[b], c[b], k, k), 2, p, 0))
    for b in reversed(range(config.blocks)):
        dec_out = cin[b] if b > 0 else c[0]
        # transposed kernels are (C_in, C_out, k, k)
        specs.append((f"dec{b}.up", "deconv", (c[b], c[b], k, k), 2, p, 1))
        specs.append((f"dec{b}.deconv2", "deconv", (c[b], c[b], k, k), 1, p, 0))
        specs.append((f"dec{b}.deconv1", "deconv", (c[b], dec_out, k, k), 1, p, 0))
    for name, ci, co in _skip_projections(config):
        specs.append((name, "proj", (co, ci, 1, 1), 1, 0, 0))
    specs.append(("head", "head", (config.classes, c[0], 1, 1), 1, 0, 0))
    return specs


def build(config, seed=0, init="uniform"):
    """Create a model with fan-in-scaled uniform weights drawn from ``seed``.

    ``init="zeros"`` gives all-zero parameters (the output is then exactly 0.5).
    """
    if not isinstance(config, MaskHeadConfig):
        raise ConfigurationError("build expects a MaskHeadConfig")
    config.validate()
    rng = np.random.default_rng(seed)
    layers = {}
    for name, kind, shape, stride, pad, opad in _layer_specs(config):
        if kind == "deconv":
            fan_in = shape[0] * shape[2] * shape[3]
            bias_len = shape[1]
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bias_len = shape[0]
        if init == "zeros":
            w = np.zeros(shape)
            bvals = np.zeros(bias_len)
        elif init == "uniform":
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=shape)
            bvals = rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in), size=bias_len)
        else:
            raise ConfigurationError(f"unknown init {init!r}")
        layers[name] = Layer(name, kind, Tensor(w, requires_grad=True),
                             Tensor(bvals, requires_grad=True), stride, pad, opad)
    return MaskHeadModel(config, layers)


def _apply(layer, x, skip=None):
    if layer.kind == "deconv":
        y = ad.conv2d_transpose(x, layer.weight, layer.bias, layer.stride, layer.padding,
                                layer.output_padding)
    else:
        y = ad.conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding)
    if skip is not None:
        y = y + skip
    return y


def _project(model, b, x):
    layer = model.layers.get(f"skip{b}.proj")
    return x if layer is None else _apply(layer, x)


def forward(model, image):
    """Per-class foreground probabilities, (classes,H,W) or (N,classes,H,W)."""
    cfg = model.config
    image = ad.as_tensor(image)
    if image.ndim not in (3, 4):
        raise DimensionError(f"image must be (C,H,W) or (N,C,H,W), got {image.shape}")
    if image.shape[-3] != cfg.in_channels or image.shape[-2:] != (cfg.input_size, cfg.input_size):
        raise DimensionError(
            f"image {image.shape} does not match config "
            f"({cfg.in_channels}, {cfg.input_size}, {cfg.input_size})")
    L = model.layers
    skip = cfg.skip_type

    x = image
    block_out = []
    conv1_out = []
    down_out = []
    for b in range(cfg.blocks):
        block_in = x
        h1 = ad.relu(_apply(L[f"enc{b}.conv1"], x))
        residual = _project(model, b, block_in) if skip is SkipType.T1 else None
        h2 = ad.relu(_apply(L[f"enc{b}.conv2"], h1, residual))
        x = ad.relu(_apply(L[f"enc{b}.down"], h2))
        conv1_out.append(h1)
        block_out.append(h2)
        down_out.append(x)

    for b in reversed(range(cfg.blocks)):
        t2 = skip is SkipType.T2
        u = ad.relu(_apply(L[f"dec{b}.up"], x, block_out[b] if t2 else None))
        d2 = ad.relu(_apply(L[f"dec{b}.deconv2"], u, conv1_out[b] if t2 else None))
        if t2:
            extra = down_out[b - 1] if b > 0 else None
        elif skip is SkipType.T3:
            extra = _project(model, b, block_out[b])
        else:
            extra = None
        x = ad.relu(_apply(L[f"dec{b}.deconv1"], d2, extra))

    return ad.sigmoid(_apply(L["head"], x))


def predict_mask(probabilities, threshold=127):
    """Binarize: foreground (255) iff round-half-away(255 p) > threshold."""
    if not (isinstance(threshold, (int, np.integer)) and 0 <= threshold <= 255):
        raise ContractError(f"threshold must be an integer in [0, 255], got {threshold!r}")
    p = probabilities.data if isinstance(probabilities, Tensor) else np.asarray(probabilities, float)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ContractError("probabilities must lie in [0, 1]")
    scaled = np.floor(255.0 * p + 0.5)
    return np.where(scaled > threshold, 255, 0).astype(np.uint8)


# --------------------------------------------------------------------------
# checkpoint: "REDH1" + config record + tensors (u32 ndim, u32 dims, <f8 values)

MAGIC = b"REDH1"


def save_checkpoint(model, path):
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<6I", cfg.input_size, cfg.in_channels, cfg.blocks,
                             cfg.kernel_size, cfg.classes, cfg.skip_type.value))
        fh.write(struct.pack(f"<{cfg.blocks}I", *cfg.channels))
        params = model.parameters()
        fh.write(struct.pack("<I", len(params)))
        for t in params:
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated at byte {pos} while reading {what}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(len(MAGIC), "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0, expected {MAGIC!r}")
    size, cin, blocks, k, classes, skip = struct.unpack("<6I", take(24, "config"))
    channels = struct.unpack(f"<{blocks}I", take(4 * blocks, "channels"))
    try:
        cfg = MaskHeadConfig(size, cin, blocks, channels, k, SkipType(skip), classes)
    except ValueError as exc:
        raise FormatError(f"{path}: invalid config record: {exc}") from None
    model = build(cfg, init="zeros")
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    if count != len(model.parameters()):
        raise FormatError(f"{path}: {count} tensors, config implies {len(model.parameters())}")
    tensors = []
    for ref in model.parameters():
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        if shape != ref.shape:
            raise FormatError(f"{path}: tensor at byte {pos} has shape {shape}, expected {ref.shape}")
        n = int(np.prod(shape))
        vals = np.frombuffer(take(8 * n, "values"), dtype="<f8").reshape(shape)
        tensors.append(Tensor(vals.astype(np.float64), requires_grad=True))
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes at offset {pos}")
    return model.with_parameters(tensors)
