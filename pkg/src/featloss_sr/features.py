"""VGG-style feature extractor exposing the activations right before each max pooling.

Block ``i`` (1-based) is a run of conv3x3 + ReLU layers; the block's output is
tap ``i``.  Between blocks sits a 2x2 max pooling, so tap ``i`` has seen exactly
``i - 1`` poolings.  Parameters are never trained here.
"""
from dataclasses import dataclass, field

import numpy as np

from . import weights as _weights
from .errors import ConfigError, ShapeError
from .tensor import ParamGroup, conv2d, conv2d_backward, maxpool2x2, maxpool2x2_backward, relu, relu_backward

VGG16_BLOCKS = ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512))
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ExtractorConfig:
    blocks: tuple = VGG16_BLOCKS
    kernel_size: int = 3
    taps: tuple = None
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(v) for v in b) for b in self.blocks))
        if self.taps is None:
            object.__setattr__(self, "taps", tuple(range(1, len(self.blocks) + 1)))
        object.__setattr__(self, "taps", tuple(sorted(set(int(t) for t in self.taps))))
        if not self.blocks:
            raise ConfigError("extractor needs at least one block")
        for convs, ch in self.blocks:
            if convs < 1 or ch < 1:
                raise ConfigError(f"invalid block ({convs}, {ch})")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer")
        for t in self.taps:
            if not 1 <= t <= len(self.blocks):
                raise ConfigError(f"tap {t} outside 1..{len(self.blocks)}")

    @classmethod
    def vgg16(cls, width_divisor=1, taps=(1, 2, 3, 4, 5)):
        """The VGG16 conv plan; ``width_divisor`` shrinks every block's width for desk-scale runs."""
        if width_divisor < 1:
            raise ConfigError("width_divisor must be >= 1")
        blocks = tuple((n, max(1, c // width_divisor)) for n, c in VGG16_BLOCKS)
        return cls(blocks=blocks, taps=taps)

    def to_dict(self):
        return {"blocks": [list(b) for b in self.blocks], "kernel_size": self.kernel_size,
                "taps": list(self.taps), "in_channels": self.in_channels}

    @classmethod
    def from_dict(cls, d):
        if "width_divisor" in d:
            return cls.vgg16(d["width_divisor"], tuple(d.get("taps", (1, 2, 3, 4, 5))))
        return cls(blocks=tuple(tuple(b) for b in d.get("blocks", VGG16_BLOCKS)),
                   kernel_size=d.get("kernel_size", 3), taps=tuple(d.get("taps", (1, 2, 3, 4, 5))),
                   in_channels=d.get("in_channels", 3))


@dataclass
class Trace:
    """Activations retained by :meth:`Extractor.forward_with_taps` for the backward pass."""

    input_shape: tuple
    convs: list = field(default_factory=list)   # per block: list of (conv input, pre-activation)
    pools: list = field(default_factory=list)   # per block: (argmax, input shape) or None


class Extractor:
    def __init__(self, config, params, dtype=np.float64, mean=None, std=None):
        self.config = config
        self.params = params
        self.dtype = np.dtype(dtype)
        c = config.in_channels
        self.mean = np.zeros(c) if mean is None else np.asarray(mean, float)
        self.std = np.ones(c) if std is None else np.asarray(std, float)
        params.set_trainable(False)

    @property
    def layer_names(self):
        return [(f"block{b}.conv{j}.weight", f"block{b}.conv{j}.bias")
                for b, (n, _) in enumerate(self.config.blocks, start=1) for j in range(1, n + 1)]

    def preprocess(self, x):
        """Replicate a 1-channel slice to ``in_channels`` and apply per-channel mean/std."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"preprocess expects (n, 1, h, w), got {x.shape}")
        c = self.config.in_channels
        m = self.mean.astype(self.dtype)[None, :, None, None]
        s = self.std.astype(self.dtype)[None, :, None, None]
        return (np.repeat(x.astype(self.dtype, copy=False), c, axis=1) - m) / s

    def preprocess_backward(self, grad):
        s = self.std.astype(grad.dtype)[None, :, None, None]
        return (grad / s).sum(axis=1, keepdims=True)

    def forward_with_taps(self, x, taps=None, retain=False):
        """Return ``(maps, trace)`` where ``maps[i]`` is tap ``i``; ``trace`` is None unless ``retain``."""
        taps = self.config.taps if taps is None else tuple(sorted(set(taps)))
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"extractor expects (n, {self.config.in_channels}, h, w), got {x.shape}")
        if not taps:
            return {}, (Trace(x.shape) if retain else None)
        last = max(taps)
        if min(taps) < 1 or last > len(self.config.blocks):
            raise ConfigError(f"taps {taps} outside 1..{len(self.config.blocks)}")
        div = 2 ** (last - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeError(f"input dims {x.shape[2:]} not divisible by {div} (needed for tap {last})")
        pad = self.config.kernel_size // 2
        trace = Trace(x.shape) if retain else None
        maps = {}
        h = x.astype(self.dtype, copy=False)
        for b, (n_conv, _) in enumerate(self.config.blocks[:last], start=1):
            pool = None
            if b > 1:
                shape = h.shape
                h, idx = maxpool2x2(h)
                pool = (idx, shape)
            convs = []
            for j in range(1, n_conv + 1):
                w = self.params[f"block{b}.conv{j}.weight"]
                bias = self.params[f"block{b}.conv{j}.bias"]
                z = conv2d(h, w, bias, 1, pad)
                if retain:
                    convs.append((h, z))
                h = relu(z)
            if retain:
                trace.convs.append(convs)
                trace.pools.append(pool)
            if b in taps:
                maps[b] = h
        return maps, trace

    def backward(self, trace, tap_grads):
        """Gradient w.r.t. the extractor input given upstream gradients per tap."""
        if not tap_grads:
            return np.zeros(trace.input_shape, self.dtype)
        last = max(tap_grads)
        if last > len(trace.convs):
            raise ValueError(f"trace only covers taps up to {len(trace.convs)}")
        pad = self.config.kernel_size // 2
        g = None
        for b in range(last, 0, -1):
            if b in tap_grads:
                tg = tap_grads[b].astype(self.dtype, copy=False)
                g = tg if g is None else g + tg
            for j in range(len(trace.convs[b - 1]), 0, -1):
                h_in, z = trace.convs[b - 1][j - 1]
                g = relu_backward(g, z)
                g = conv2d_backward(g, h_in, self.params[f"block{b}.conv{j}.weight"], 1, pad,
                                    need_input=True, need_kernel=False)[0]
            pool = trace.pools[b - 1]
            if pool is not None:
                g = maxpool2x2_backward(g, pool[0], pool[1])
        return g

    def state_bytes(self):
        return save_weights(self)


def build_extractor(config=None, init="random", seed=0, dtype=np.float64, imagenet_norm=False):
    """Create an extractor with He-normal (``init="random"``) or all-zero parameters."""
    config = ExtractorConfig() if config is None else config
    if init not in ("random", "zeros"):
        raise ConfigError(f"unknown init {init!r}")
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    tensors = {}
    cin = config.in_channels
    for b, (n_conv, ch) in enumerate(config.blocks, start=1):
        for j in range(1, n_conv + 1):
            if init == "random":
                w = rng.standard_normal((ch, cin, k, k)) * np.sqrt(2.0 / (cin * k * k))
            else:
                w = np.zeros((ch, cin, k, k))
            tensors[f"block{b}.conv{j}.weight"] = w.astype(dtype)
            tensors[f"block{b}.conv{j}.bias"] = np.zeros(ch, dtype)
            cin = ch
    mean, std = (IMAGENET_MEAN, IMAGENET_STD) if imagenet_norm else (None, None)
    return Extractor(config, ParamGroup(tensors), dtype, mean, std)


def save_weights(extractor):
    return _weights.dump_manifest(extractor.params.tensors)


def load_weights(extractor, data):
    """Load manifest bytes into ``extractor`` in place and return it."""
    stored = _weights.parse_manifest(data)
    extractor.params = ParamGroup(_weights.assign(extractor.params, stored, extractor.dtype))
    extractor.params.set_trainable(False)
    return extractor
