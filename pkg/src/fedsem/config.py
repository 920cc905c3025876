"""Experiment configuration: defaults, validation, JSON round-trip."""

import dataclasses
import json
import math
from dataclasses import dataclass

TASKS = ("classify", "reconstruct")
PRESETS = ("desk", "paper")

DEFAULT_ROUNDS = {"classify": 40, "reconstruct": 30}


@dataclass
class ExperimentConfig:
    task: str = "classify"
    devices: int = 2
    delta: float = 0.6
    bandwidth_ratio: float = 0.04
    snr_db: float = 3.0
    preset: str = "desk"
    rounds: int = None  # None -> task default
    local_epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    out_dir: str = "runs"
    lam: float = 0.5
    tau_k: float = 0.5
    mu: float = 0.2
    train_scenes: int = 48
    test_scenes: int = 32

    @property
    def resolved_rounds(self):
        if self.rounds is not None:
            return self.rounds
        return DEFAULT_ROUNDS[self.task]

    def validate(self):
        """Collect every violated precondition; empty list means valid."""
        errors = []
        if self.task not in TASKS:
            errors.append(f"task must be one of {TASKS}, got {self.task!r}")
        if self.preset not in PRESETS:
            errors.append(f"preset must be one of {PRESETS}, "
                          f"got {self.preset!r}")
        if not isinstance(self.devices, int) or self.devices < 1:
            errors.append(f"devices must be a positive integer, "
                          f"got {self.devices!r}")
        if not 0.0 <= self.delta <= 1.0:
            errors.append(f"delta must be in [0, 1], got {self.delta!r}")
        if not 0.0 < self.bandwidth_ratio <= 1.0:
            errors.append(f"bandwidth_ratio must be in (0, 1], "
                          f"got {self.bandwidth_ratio!r}")
        if not math.isfinite(self.snr_db):
            errors.append(f"snr_db must be finite, got {self.snr_db!r}")
        if self.rounds is not None and (not isinstance(self.rounds, int)
                                        or self.rounds < 1):
            errors.append(f"rounds must be a positive integer, "
                          f"got {self.rounds!r}")
        if not isinstance(self.local_epochs, int) or self.local_epochs < 0:
            errors.append(f"local_epochs must be a non-negative integer, "
                          f"got {self.local_epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            errors.append(f"batch_size must be a positive integer, "
                          f"got {self.batch_size!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            errors.append(f"seed must be a non-negative integer, "
                          f"got {self.seed!r}")
        if not 0.0 <= self.lam <= 1.0:
            errors.append(f"lam must be in [0, 1], got {self.lam!r}")
        if not self.tau_k > 0.0:
            errors.append(f"tau_k must be positive, got {self.tau_k!r}")
        if not 0.0 <= self.mu < 1.0:
            errors.append(f"mu must be in [0, 1), got {self.mu!r}")
        if not isinstance(self.train_scenes, int) or self.train_scenes < 1:
            errors.append(f"train_scenes must be a positive integer, "
                          f"got {self.train_scenes!r}")
        if not isinstance(self.test_scenes, int) or self.test_scenes < 1:
            errors.append(f"test_scenes must be a positive integer, "
                          f"got {self.test_scenes!r}")
        return errors

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, payload):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**payload)

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        if not isinstance(payload, dict):
            raise ValueError("config JSON must be an object")
        return cls.from_dict(payload)


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return ExperimentConfig.from_json(fh.read())


def merge_overrides(cfg, overrides):
    """Apply non-None override values on top of a config."""
    updates = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(cfg, **updates)
