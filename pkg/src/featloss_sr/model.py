"""Desk-scale UNet super-resolution network and its two-stage training driver.

Layer plan for ``levels = L``, ``base_channels = c`` and scale ``r``:

* encoder stage k (k = 0..L-1), width ``c * 2**k``: conv3x3 + relu, conv3x3 + relu,
  followed by a 2x2 max pool for every stage except the last;
* decoder stage k (k = L-2..0): nearest x2 upsample, concatenate the encoder skip
  of stage k, conv3x3 + relu, conv3x3 + relu, width ``c * 2**k``;
* head: conv3x3 to ``r*r`` channels, pixel shuffle by ``r``.

With ``residual`` the network predicts a correction added to the bicubic upsampling
of its input.  With ``input_norm`` each sample is divided by its own maximum before
the network and the output multiplied back, so the learned mapping does not depend
on the global intensity scale of the data.  All convs use padding 1; inputs whose size is not a multiple of
``2**(L-1)`` are edge-padded and the output is cropped back.
"""
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import weights as _weights
from .data.resample import bicubic_resample
from .errors import ConfigError, DivergenceError, ShapeError
from .loss import LossConfig, calibrate_weights, loss_and_gradient
from .metrics import mean_fsum, score_slice
from .tensor import backend, ops
from .tensor.optim import AdamState, ParamGroup, adam_step

# Departures of this desk-scale model from the original large-scale setup.  Printed
# into every checkpoint sidecar and experiment report.
DEVIATIONS = (
    "encoder is a plain conv stack trained from scratch, not a pretrained ResNet18",
    "self-attention layers are omitted",
    "no learning-rate finder; lr is explicit configuration",
    "weight decay is decoupled and defaults to 0",
    "training uses full phantom slices, no cropping or augmentation",
    "global residual to the bicubic upsampling of the input",
    "per-sample input scaling by the sample maximum",
)


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    base_channels: int = 16
    scale: int = 2
    seed: int = 0
    activation: str = "relu"
    residual: bool = True
    input_norm: bool = True

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1:
            raise ConfigError("levels and base_channels must be >= 1")
        if self.scale < 1:
            raise ConfigError("scale must be >= 1")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def multiple(self):
        return 2 ** (self.levels - 1)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def layer_plan(config):
    """Ordered list of ``(name, in_channels, out_channels, tag)`` for every conv layer."""
    c = [config.base_channels * 2 ** k for k in range(config.levels)]
    plan = []
    cin = 1
    for k in range(config.levels):
        plan.append((f"enc{k}.conv0", cin, c[k], "encoder"))
        plan.append((f"enc{k}.conv1", c[k], c[k], "encoder"))
        cin = c[k]
    for k in range(config.levels - 2, -1, -1):
        plan.append((f"dec{k}.conv0", c[k + 1] + c[k], c[k], "decoder"))
        plan.append((f"dec{k}.conv1", c[k], c[k], "decoder"))
    plan.append(("head", c[0], config.scale ** 2, "decoder"))
    return plan


def parameter_count(config, k=3):
    return sum(cout * cin * k * k + cout for _, cin, cout, _ in layer_plan(config))


def he_normal(rng, cout, cin, k=3):
    return rng.standard_normal((cout, cin, k, k)) * math.sqrt(2.0 / (cin * k * k))


def icnr_init(head_kernel, r, seed=0):
    """ICNR: every sub-pixel group of an output channel gets a copy of one random kernel.

    ``head_kernel`` only provides the shape (and dtype); a fresh array is returned.
    Channel ``g*r*r + j`` shares its kernel with channel ``g*r*r``.
    """
    head_kernel = np.asarray(head_kernel)
    cout, cin, kh, kw = head_kernel.shape
    if r < 1 or cout % (r * r):
        raise ShapeError(f"head output channels {cout} not divisible by r^2={r * r}")
    groups = cout // (r * r)
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((groups, cin, kh, kw)) * math.sqrt(2.0 / (cin * kh * kw))
    dtype = head_kernel.dtype if head_kernel.dtype.kind == "f" else np.float64
    return np.repeat(base, r * r, axis=0).astype(dtype)


class UNet:
    def __init__(self, config, params, dtype=np.float64):
        self.config = config
        self.params = params
        self.dtype = np.dtype(dtype)

    @property
    def plan(self):
        return layer_plan(self.config)

    def num_parameters(self):
        return self.params.num_parameters()

    def _conv(self, name, x, cache):
        w = self.params[f"{name}.weight"]
        y = ops.conv2d(x, w, self.params[f"{name}.bias"], 1, 1)
        if cache is not None:
            cache[name] = x
        return y

    def _act(self, name, y, cache):
        if cache is not None:
            cache[name + ".pre"] = y
        return ops.relu(y)

    def forward(self, x, retain=False):
        """``x``: (n, 1, h, w) LR batch.  Returns ``(output, cache)``."""
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected (n, 1, h, w) input, got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        n, _, h, w = x.shape
        if self.config.input_norm:
            peak = np.abs(x).reshape(n, -1).max(axis=1)
            s = np.where(peak > 0, peak, 1.0).astype(self.dtype)[:, None, None, None]
            x = x / s
        m = self.config.multiple
        ph, pw = (-h) % m, (-w) % m
        xin = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge") if (ph or pw) else x
        cache = {} if retain else None
        skips, pools = [], []
        a = xin
        L = self.config.levels
        for k in range(L):
            a = self._act(f"enc{k}.conv0", self._conv(f"enc{k}.conv0", a, cache), cache)
            a = self._act(f"enc{k}.conv1", self._conv(f"enc{k}.conv1", a, cache), cache)
            if k < L - 1:
                skips.append(a)
                a, idx = ops.maxpool2x2(a)
                pools.append((idx, skips[-1].shape))
        for k in range(L - 2, -1, -1):
            up = ops.upsample_nearest(a, 2)
            a = np.concatenate([up, skips[k]], axis=1)
            if cache is not None:
                cache[f"dec{k}.split"] = up.shape[1]
            a = self._act(f"dec{k}.conv0", self._conv(f"dec{k}.conv0", a, cache), cache)
            a = self._act(f"dec{k}.conv1", self._conv(f"dec{k}.conv1", a, cache), cache)
        r = self.config.scale
        out = ops.pixel_shuffle(self._conv("head", a, cache), r)
        out = out[:, :, : h * r, : w * r]
        if self.config.residual:
            out = out + bicubic_up_batch(x, r).astype(self.dtype, copy=False)
        if self.config.input_norm:
            out = out * s
        if cache is not None:
            cache["scale"] = s if self.config.input_norm else None
            cache["pools"] = pools
            cache["padded_shape"] = (n, 1, (h + ph) * r, (w + pw) * r)
        return np.ascontiguousarray(out), cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out, frozen_tags=()):
        """Parameter gradients for ``sum(grad_out * output)``.

        Layers whose tag is in ``frozen_tags`` get no gradient entry, and backprop
        stops as soon as no trainable layer remains upstream.
        """
        grads = {}
        tags = {name: tag for name, _, _, tag in self.plan}
        frozen = {name for name, tag in tags.items() if tag in frozen_tags}
        enc_frozen = all(f"enc{k}.conv{j}" in frozen for k in range(self.config.levels) for j in (0, 1))
        r = self.config.scale
        if cache["scale"] is not None:
            grad_out = grad_out * cache["scale"]
        g = np.zeros(cache["padded_shape"], dtype=self.dtype)
        g[:, :, : grad_out.shape[2], : grad_out.shape[3]] = grad_out
        g = ops.pixel_shuffle_backward(g, r)

        def conv_back(name, g, need_input=True):
            x = cache[name]
            gx, gw, gb = ops.conv2d_backward(g, x, self.params[f"{name}.weight"], 1, 1,
                                             need_input=need_input, need_kernel=name not in frozen)
            if name not in frozen:
                grads[f"{name}.weight"], grads[f"{name}.bias"] = gw, gb
            return gx

        def act_back(name, g):
            return ops.relu_backward(g, cache[name + ".pre"])

        g = conv_back("head", g)
        L = self.config.levels
        skip_grads = {}
        for k in range(0, L - 1):
            g = act_back(f"dec{k}.conv1", g)
            g = conv_back(f"dec{k}.conv1", g)
            g = act_back(f"dec{k}.conv0", g)
            g = conv_back(f"dec{k}.conv0", g, need_input=not (enc_frozen and k == L - 2))
            if enc_frozen and k == L - 2:
                g = None
                break
            split = cache[f"dec{k}.split"]
            skip_grads[k] = g[:, split:]
            g = ops.upsample_nearest_backward(g[:, :split], 2)
        if enc_frozen:
            return grads
        # ``g`` is now the gradient at the output of the deepest encoder stage
        pools = cache["pools"]
        for k in range(L - 1, -1, -1):
            if k < L - 1:
                idx, shape = pools[k]
                g = ops.maxpool2x2_backward(g, idx, shape) + skip_grads[k]
            g = act_back(f"enc{k}.conv1", g)
            g = conv_back(f"enc{k}.conv1", g)
            g = act_back(f"enc{k}.conv0", g)
            g = conv_back(f"enc{k}.conv0", g, need_input=k > 0)
        return grads


def bicubic_up_batch(x, r):
    out = np.empty(x.shape[:2] + (x.shape[2] * r, x.shape[3] * r), dtype=np.float64)
    for i in range(x.shape[0]):
        for c in range(x.shape[1]):
            out[i, c] = bicubic_resample(x[i, c], r, "up")
    return out


def default_dtype():
    return np.float32 if backend.get_mode() == "fast" else np.float64


def build_unet(config=UNetConfig(), dtype=None, init_head="icnr"):
    """Fresh seeded UNet; ``dtype`` defaults to float64 in reference mode, float32 in fast mode."""
    dtype = np.dtype(dtype or default_dtype())
    rng = np.random.default_rng(config.seed)
    tensors, tags = {}, {}
    for name, cin, cout, tag in layer_plan(config):
        if name == "head":
            w = icnr_init(np.zeros((cout, cin, 3, 3)), config.scale, seed=config.seed + 1) if init_head == "icnr" \
                else he_normal(rng, cout, cin)
            if config.residual:
                w = w * 0.1   # start close to the bicubic estimate
        else:
            w = he_normal(rng, cout, cin)
        tensors[f"{name}.weight"] = w.astype(dtype)
        tensors[f"{name}.bias"] = np.zeros(cout, dtype)
        tags[f"{name}.weight"] = tags[f"{name}.bias"] = tag
    return UNet(config, ParamGroup(tensors, tags=tags), dtype)


def reinit_head(model, scale, seed=0):
    """Copy ``model``'s body into a network of a new scale with an ICNR-initialised head."""
    config = UNetConfig(**{**model.config.to_dict(), "scale": scale})
    fresh = build_unet(config, model.dtype)
    tensors = dict(fresh.params.tensors)
    for name, arr in model.params.tensors.items():
        if not name.startswith("head."):
            tensors[name] = arr.copy()
    head = icnr_init(tensors["head.weight"], scale, seed=seed)
    tensors["head.weight"] = (head * (0.1 if config.residual else 1.0)).astype(model.dtype)
    return UNet(config, ParamGroup(tensors, tags=dict(fresh.params.tags)), model.dtype)


@dataclass(frozen=True)
class TrainSchedule:
    frozen_epochs: int = 1
    unfrozen_epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    weight_decay: float = 0.0
    warmup_epochs: int = 1

    def __post_init__(self):
        for k in ("frozen_epochs", "unfrozen_epochs", "batch_size", "warmup_epochs"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    train: dict
    val: dict
    val_psnr: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def to_dict(self):
        return [asdict(r) for r in self.records]


def stack_pairs(pairs):
    lr = np.stack([p.lr for p in pairs])[:, None]
    hr = np.stack([p.hr for p in pairs])[:, None]
    return lr, hr


def batches(pairs, batch_size, rng=None):
    order = np.arange(len(pairs)) if rng is None else rng.permutation(len(pairs))
    for i in range(0, len(pairs), batch_size):
        yield [pairs[j] for j in order[i:i + batch_size]]


def _breakdown_dict(b):
    return {"L_P": b.L_P, "L_Fi": {str(k): v for k, v in b.L_Fi.items()}, "L_F": b.L_F, "L": b.L}


def _mean_breakdowns(items):
    """Size-weighted mean of (breakdown, n) pairs as a plain dict."""
    total = sum(n for _, n in items)
    def avg(get):
        return math.fsum(get(b) * n for b, n in items) / total
    taps = items[0][0].L_Fi.keys()
    return {"L_P": avg(lambda b: b.L_P), "L_Fi": {str(t): avg(lambda b, t=t: b.L_Fi[t]) for t in taps},
            "L_F": avg(lambda b: b.L_F), "L": avg(lambda b: b.L)}


def _check_finite(b, where):
    if not math.isfinite(b.L):
        raise DivergenceError(f"non-finite loss {b.L} during {where}")


def train_epoch(model, pairs, loss_config, extractor, state, rng, batch_size, frozen_tags=()):
    model.params.set_trainable(True)
    for tag in frozen_tags:
        model.params.set_trainable(False, tag)
    items = []
    for batch in batches(pairs, batch_size, rng):
        lr, hr = stack_pairs(batch)
        out, cache = model.forward(lr, retain=True)
        b, g = loss_and_gradient(out, hr.astype(model.dtype), extractor, loss_config)
        _check_finite(b, "training")
        grads = model.backward(cache, g, frozen_tags)
        model.params, state = adam_step(model.params, grads, state)
        items.append((b, len(batch)))
    model.params.set_trainable(True)
    return _mean_breakdowns(items), state


def evaluate(model, pairs, loss_config, extractor=None, batch_size=16):
    """Mean loss breakdown and mean masked [0,1]-rescaled PSNR over ``pairs``."""
    from .loss import combined_loss

    items, psnrs = [], []
    for batch in batches(pairs, batch_size):
        lr, hr = stack_pairs(batch)
        out = model(lr)
        items.append((combined_loss(out, hr.astype(model.dtype), extractor, loss_config), len(batch)))
        for p, o in zip(batch, out):
            s = score_slice(o[0], p.hr, p.mask)
            if s is not None:
                psnrs.append(s.psnr)
    return _mean_breakdowns(items), mean_fsum(psnrs)


@dataclass
class CalibrationOutcome:
    result: object            # CalibrationResult
    warm_params: ParamGroup   # parameters right after the warmup epoch
    state: AdamState


def calibrate(model, pairs, loss_config, extractor, schedule):
    """Warm up on the pixel loss, then measure mean L_P and each L_Fi over one pass.

    ``pairs`` is the calibration batch (the training set).  The returned weights make
    ``w_i * L_Fi == L_P`` on exactly that pass.
    """
    rng = np.random.default_rng(schedule.seed + 7919)
    state = AdamState(lr=schedule.lr, weight_decay=schedule.weight_decay)
    pixel_only = LossConfig()
    for _ in range(schedule.warmup_epochs):
        _, state = train_epoch(model, pairs, pixel_only, None, state, rng, schedule.batch_size)
    measure = LossConfig.unit(loss_config.active_taps)
    mean, _ = evaluate_losses(model, pairs, measure, extractor, schedule.batch_size)
    result = calibrate_weights(mean["L_P"], {int(t): v for t, v in mean["L_Fi"].items()})
    return CalibrationOutcome(result, model.params.copy(), state)


def evaluate_losses(model, pairs, loss_config, extractor, batch_size):
    from .loss import combined_loss

    items = []
    for batch in batches(pairs, batch_size):
        lr, hr = stack_pairs(batch)
        b = combined_loss(model(lr), hr.astype(model.dtype), extractor, loss_config)
        _check_finite(b, "calibration")
        items.append((b, len(batch)))
    return _mean_breakdowns(items), None


def fit(model, train_pairs, val_pairs, schedule, loss_config=LossConfig(), extractor=None,
        calibrate_loss=None, progress=None):
    """Two-stage training: ``frozen_epochs`` with the encoder fixed, then ``unfrozen_epochs``.

    With feature taps active (or ``calibrate_loss=True``) the weights are calibrated
    first.  Returns ``(model, TrainLog, CalibrationResult or None)``.
    """
    train_pairs, val_pairs = list(train_pairs), list(val_pairs)
    if not train_pairs or not val_pairs:
        raise ConfigError("training and validation streams must be nonempty")
    if calibrate_loss is None:
        calibrate_loss = bool(loss_config.active_taps)
    calibration = None
    if calibrate_loss and loss_config.active_taps:
        outcome = calibrate(model, train_pairs, loss_config, extractor, schedule)
        calibration = outcome.result
        loss_config = loss_config.with_weights(calibration.weights)
    rng = np.random.default_rng(schedule.seed)
    state = AdamState(lr=schedule.lr, weight_decay=schedule.weight_decay)
    log = TrainLog()
    stages = [("frozen", ("encoder",))] * schedule.frozen_epochs + [("unfrozen", ())] * schedule.unfrozen_epochs
    for epoch, (stage, frozen) in enumerate(stages):
        train, state = train_epoch(model, train_pairs, loss_config, extractor, state, rng,
                                   schedule.batch_size, frozen)
        val, vpsnr = evaluate(model, val_pairs, loss_config, extractor, schedule.batch_size)
        if not math.isfinite(val["L"]):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        log.append(EpochRecord(epoch, stage, train, val, vpsnr))
        if progress:
            progress(log.records[-1])
    return model, log, calibration


def predict_volume(model, dwi, factor, batch_size=16):
    """Slice-wise SR of every axial slice of every volume; returns a new DwiVolumeSet."""
    if factor != model.config.scale:
        raise ShapeError(f"model scale {model.config.scale} does not match factor {factor}")
    X, Y, Z, V = dwi.volumes.shape
    slices = dwi.volumes.transpose(3, 2, 0, 1).reshape(V * Z, 1, X, Y)
    out = np.empty((V * Z, 1, X * factor, Y * factor))
    for i in range(0, V * Z, batch_size):
        out[i:i + batch_size] = model(slices[i:i + batch_size])
    sr = out.reshape(V, Z, X * factor, Y * factor).transpose(2, 3, 1, 0)
    mask = dwi.mask.repeat(factor, axis=0).repeat(factor, axis=1)
    return dwi.replace(volumes=np.ascontiguousarray(sr), mask=mask)


# -- checkpoints -------------------------------------------------------------------

def checkpoint_bytes(model, schedule=None, calibration=None, loss_config=None, extra=None):
    """Return ``(weights_bytes, sidecar_json)``."""
    blob = _weights.dump_manifest(model.params.tensors)
    side = {
        "model": model.config.to_dict(),
        "dtype": model.dtype.name,
        "schedule": schedule.to_dict() if schedule else None,
        "loss": loss_config.to_dict() if loss_config else None,
        "calibration": json.loads(calibration.to_json()) if calibration else None,
        "deviations": list(DEVIATIONS),
        "weights_sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra:
        side.update(extra)
    return blob, json.dumps(side, indent=2, sort_keys=True)


def save_checkpoint(model, path, **kw):
    """Write ``<path>.weights`` and ``<path>.json``."""
    blob, side = checkpoint_bytes(model, **kw)
    with open(f"{path}.weights", "wb") as fh:
        fh.write(blob)
    with open(f"{path}.json", "w") as fh:
        fh.write(side)
    return f"{path}.weights", f"{path}.json"


def load_checkpoint(path, dtype=None):
    with open(f"{path}.json") as fh:
        side = json.load(fh)
    with open(f"{path}.weights", "rb") as fh:
        blob = fh.read()
    config = UNetConfig.from_dict(side["model"])
    model = build_unet(config, dtype or side["dtype"])
    model.params.tensors = _weights.assign(model.params, _weights.parse_manifest(blob))
    return model, side
