"""Experiment plans: which tap sets to train, on what data, with which schedule."""
import hashlib
import json
from dataclasses import dataclass, field

from .. import __version__
from ..data.phantom import PhantomSpec
from ..errors import ConfigError
from ..features import ExtractorConfig
from ..model import TrainSchedule, UNetConfig

KINDS = ("ablation", "isolation", "baseline", "resolution")

ABLATION = ((1, 2, 3, 4, 5), (1, 2, 3, 4), (1, 2, 3), (1, 2), (1,))
ISOLATION = ((1,), (2,), (3,), (4,), (5,))
BASELINE = ((),)
FINETUNE = TrainSchedule(frozen_epochs=5, unfrozen_epochs=20)


def preset_tap_sets(kind, best=(1,)):
    if kind == "ablation":
        return ABLATION
    if kind == "isolation":
        return ISOLATION
    if kind == "baseline":
        return BASELINE
    if kind == "resolution":
        return (tuple(best), ())
    raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")


def tap_label(taps):
    return "{" + ",".join(str(t) for t in taps) + "}" if taps else "{}"


@dataclass
class DataConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_cases: int = 12
    factor: int = 2
    split_sizes: tuple = (7, 2, 3)   # None -> largest-remainder 8:2:5
    case_seed: int = 100

    def __post_init__(self):
        if isinstance(self.phantom, dict):
            self.phantom = PhantomSpec.from_dict(self.phantom)
        if self.split_sizes is not None:
            self.split_sizes = tuple(int(s) for s in self.split_sizes)
        if self.factor not in (2, 3):
            raise ConfigError(f"factor must be 2 or 3, got {self.factor}")
        if self.n_cases < 3:
            raise ConfigError("need at least 3 cases")

    def to_dict(self):
        return {"phantom": self.phantom.to_dict(), "n_cases": self.n_cases, "factor": self.factor,
                "split_sizes": list(self.split_sizes) if self.split_sizes else None,
                "case_seed": self.case_seed}


@dataclass
class ExperimentPlan:
    kind: str = "baseline"
    tap_sets: tuple = None
    data: DataConfig = field(default_factory=DataConfig)
    model: UNetConfig = field(default_factory=UNetConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    finetune: TrainSchedule = FINETUNE
    extractor: ExtractorConfig = field(default_factory=lambda: ExtractorConfig.vgg16(width_divisor=8))
    extractor_seed: int = 0
    best_taps: tuple = (1,)
    seed: int = 0
    mode: str = "reference"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        if isinstance(self.model, dict):
            self.model = UNetConfig.from_dict(self.model)
        if isinstance(self.schedule, dict):
            self.schedule = TrainSchedule.from_dict(self.schedule)
        if isinstance(self.finetune, dict):
            self.finetune = TrainSchedule.from_dict(self.finetune)
        if isinstance(self.extractor, dict):
            self.extractor = ExtractorConfig.from_dict(self.extractor)
        self.best_taps = tuple(int(t) for t in self.best_taps)
        if self.tap_sets is None:
            self.tap_sets = preset_tap_sets(self.kind, self.best_taps)
        self.tap_sets = tuple(tuple(int(t) for t in ts) for ts in self.tap_sets)
        n_blocks = len(self.extractor.blocks)
        for ts in self.tap_sets:
            if any(t < 1 or t > n_blocks for t in ts):
                raise ConfigError(f"tap set {tap_label(ts)} outside 1..{n_blocks}")
        if self.model.scale != self.data.factor:
            self.model = UNetConfig(**{**self.model.to_dict(), "scale": self.data.factor})
        if self.mode not in ("reference", "fast"):
            raise ConfigError(f"mode must be reference or fast, got {self.mode!r}")

    def to_dict(self):
        return {
            "kind": self.kind,
            "tap_sets": [list(t) for t in self.tap_sets],
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "schedule": self.schedule.to_dict(),
            "finetune": self.finetune.to_dict(),
            "extractor": self.extractor.to_dict(),
            "extractor_seed": self.extractor_seed,
            "best_taps": list(self.best_taps),
            "seed": self.seed,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid plan JSON: {exc}") from None
        return cls.from_dict(d)

    def with_seed(self, seed):
        d = self.to_dict()
        d["seed"] = seed
        return ExperimentPlan.from_dict(d)


def config_hash(plan):
    """sha256 over the canonical plan JSON (which carries every seed) and the code version."""
    payload = json.dumps({"plan": plan.to_dict(), "version": __version__}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()
