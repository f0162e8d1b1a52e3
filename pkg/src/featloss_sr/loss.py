"""Pixel L1 loss, per-block feature losses, their weighted combination and calibration.

    L_P    = mean |pred - target|
    L_Fi   = mean over batch of (1 / hwc) * sum |B_i(pred) - B_i(target)|
    L_F    = sum_i w_i * L_Fi
    L      = L_P + L_F

Weights are calibrated so that each ``w_i * L_Fi`` equals ``L_P`` on a measured pass.
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, ConfigError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    active_taps: tuple = ()
    weights: dict = field(default_factory=dict)
    pixel_term_enabled: bool = True

    def __post_init__(self):
        taps = tuple(sorted(set(int(t) for t in self.active_taps)))
        object.__setattr__(self, "active_taps", taps)
        weights = {int(k): float(v) for k, v in self.weights.items()}
        if set(weights) != set(taps):
            raise ConfigError(f"weights given for taps {sorted(weights)} but active taps are {list(taps)}")
        if any(not (w >= 0 and math.isfinite(w)) for w in weights.values()):
            raise ConfigError("feature weights must be finite and nonnegative")
        object.__setattr__(self, "weights", weights)

    @classmethod
    def unit(cls, taps):
        return cls(tuple(taps), {t: 1.0 for t in taps})

    def with_weights(self, weights):
        return LossConfig(self.active_taps, {t: weights[t] for t in self.active_taps}, self.pixel_term_enabled)

    def to_dict(self):
        return {"active_taps": list(self.active_taps),
                "weights": {str(k): v for k, v in self.weights.items()},
                "pixel_term_enabled": self.pixel_term_enabled}


@dataclass(frozen=True)
class LossBreakdown:
    L_P: float
    L_Fi: dict
    L_F: float
    L: float


@dataclass(frozen=True)
class CalibrationResult:
    L_P: float
    L_Fi: dict
    weights: dict

    def to_json(self):
        per_block = {str(t): {"L_F": self.L_Fi[t], "w": self.weights[t]} for t in sorted(self.L_Fi)}
        return json.dumps({"L_P": self.L_P, "per_block": per_block}, indent=2)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        per = d["per_block"]
        return cls(float(d["L_P"]), {int(k): float(v["L_F"]) for k, v in per.items()},
                   {int(k): float(v["w"]) for k, v in per.items()})


def _check_pair(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")


def pixel_loss(pred, target):
    _check_pair(pred, target)
    return float(np.mean(np.abs(pred - target)))


def feature_loss_block(pred_map, target_map):
    _check_pair(pred_map, target_map)
    if pred_map.ndim != 4:
        raise ShapeError(f"feature maps must be 4D, got {pred_map.shape}")
    n = pred_map.shape[0]
    per_item = np.abs(pred_map - target_map).reshape(n, -1).mean(axis=1)
    return float(per_item.mean())


def _l1_grad(diff, scale):
    # sign(0) = 0 keeps the subgradient convention of the tensor ops
    return np.sign(diff) * scale


def _evaluate(pred, target, extractor, config, want_grad):
    _check_pair(pred, target)
    diff = pred - target
    L_P = float(np.mean(np.abs(diff)))
    taps = config.active_taps
    L_Fi = {}
    grad_feat = None
    if taps:
        if extractor is None:
            raise ConfigError("feature taps are active but no extractor was given")
        xp = extractor.preprocess(pred)
        pmaps, trace = extractor.forward_with_taps(xp, taps, retain=want_grad)
        tmaps, _ = extractor.forward_with_taps(extractor.preprocess(target), taps)
        tap_grads = {}
        for t in taps:
            L_Fi[t] = feature_loss_block(pmaps[t], tmaps[t])
            if want_grad and config.weights[t] != 0:
                d = pmaps[t] - tmaps[t]
                tap_grads[t] = _l1_grad(d, config.weights[t] / d.size)
        if want_grad and tap_grads:
            grad_feat = extractor.preprocess_backward(extractor.backward(trace, tap_grads))
    L_F = math.fsum(config.weights[t] * L_Fi[t] for t in taps) if taps else 0.0
    L = (L_P + L_F) if config.pixel_term_enabled else L_F
    breakdown = LossBreakdown(L_P, L_Fi, L_F, L)
    if not want_grad:
        return breakdown, None
    grad = _l1_grad(diff, 1.0 / diff.size) if config.pixel_term_enabled else np.zeros_like(diff)
    if grad_feat is not None:
        grad = grad + grad_feat.astype(grad.dtype, copy=False)
    return breakdown, grad.astype(pred.dtype, copy=False)


def combined_loss(pred, target, extractor, config):
    """Full :class:`LossBreakdown` for a prediction/target batch of shape (n, 1, h, w)."""
    return _evaluate(pred, target, extractor, config, want_grad=False)[0]


def loss_gradient(pred, target, extractor, config):
    """Gradient of the combined loss with respect to ``pred``."""
    return _evaluate(pred, target, extractor, config, want_grad=True)[1]


def loss_and_gradient(pred, target, extractor, config):
    return _evaluate(pred, target, extractor, config, want_grad=True)


def calibrate_weights(measured_L_P, measured_L_Fi):
    """Choose ``w_i = L_P / L_Fi`` so every weighted block contributes exactly ``L_P``."""
    if not (measured_L_P >= 0 and math.isfinite(measured_L_P)):
        raise CalibrationError(f"invalid pixel loss {measured_L_P}")
    bad = {t: v for t, v in measured_L_Fi.items() if not (v > 0 and math.isfinite(v))}
    if bad:
        raise CalibrationError(f"degenerate feature losses (must be > 0) for taps {sorted(bad)}")
    weights = {int(t): measured_L_P / v for t, v in measured_L_Fi.items()}
    return CalibrationResult(float(measured_L_P), {int(t): float(v) for t, v in measured_L_Fi.items()}, weights)
