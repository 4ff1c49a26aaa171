"""Training configuration, named profiles and the flat ``key = value`` file format."""

import dataclasses
from dataclasses import dataclass, field

from .network import NetworkSpec

_SPEC_KEYS = ("p", "q", "r", "m", "k")


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch: int = 64
    epochs: int = 200
    iters_per_epoch: int = 1000
    pretrain_epochs: int = 200
    momentum: float = 0.0
    warmup: int = 0
    lambda_ismp: float = 1.0
    seed: int = 0
    checkpoint_every: int = 1
    spec: NetworkSpec = field(default_factory=NetworkSpec)
    baseline_depth: int = 17
    holdout: float = 0.05
    frozen_pool: int = 0
    freeze_irs: bool = False
    serpentine: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.lambda_ismp < 0:
            raise ValueError(f"lambda_ismp must be >= 0, got {self.lambda_ismp}")
        if min(self.epochs, self.pretrain_epochs, self.iters_per_epoch) < 0:
            raise ValueError("epoch and iteration counts must be >= 0")
        if self.warmup < 0:
            raise ValueError(f"warmup must be >= 0, got {self.warmup}")
        if not 0 <= self.holdout < 1:
            raise ValueError(f"holdout must be in [0, 1), got {self.holdout}")

    def lr_at(self, step):
        """Learning rate for the ``step``-th update (0-based) of a training stage.

        Ramps linearly from lr/warmup up to lr over the first ``warmup`` updates.
        """
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        return self.lr

    @property
    def pretrain_steps(self):
        return self.pretrain_epochs * self.iters_per_epoch

    @property
    def end_to_end_steps(self):
        return self.epochs * self.iters_per_epoch

    @property
    def total_steps(self):
        return self.pretrain_steps + self.end_to_end_steps

    @property
    def baseline_spec(self):
        return NetworkSpec(p=0, q=0, r=self.baseline_depth, m=self.spec.m, k=self.spec.k)

    def replace(self, **changes):
        spec_changes = {k: changes.pop(k) for k in _SPEC_KEYS if k in changes}
        spec = dataclasses.replace(self.spec, **spec_changes) if spec_changes else self.spec
        return dataclasses.replace(self, spec=changes.pop("spec", spec), **changes)

    def as_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "spec":
                out.update({k: getattr(self.spec, k) for k in _SPEC_KEYS})
            else:
                out[f.name] = getattr(self, f.name)
        return out


PROFILES = {
    # schedule and sizes as published
    "paper": TrainConfig(),
    # small enough for a single CPU core
    "desk": TrainConfig(
        lr=1e-2, batch=8, epochs=20, iters_per_epoch=1000, pretrain_epochs=2,
        momentum=0.9, warmup=1000, spec=NetworkSpec(p=3, q=3, r=3, m=16, k=5), baseline_depth=3,
    ),
}


def profile(name):
    try:
        return dataclasses.replace(PROFILES[name])
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def _convert(key, raw, like):
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def parse_config_text(text, base=None):
    """Apply ``key = value`` lines (``#`` comments) on top of ``base``."""
    base = base or TrainConfig()
    current = base.as_dict()
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in current:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            changes[key] = _convert(key, raw, current[key])
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from None
    return base.replace(**changes)


def load_config(path, base=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)


def format_config(config):
    return "".join(f"{k} = {v}\n" for k, v in config.as_dict().items())
