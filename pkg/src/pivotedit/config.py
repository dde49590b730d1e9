"""Structured run configuration.

Config files are JSON with the sections ``schedule``, ``stdg``,
``control``, ``tune`` plus top-level ``omega`` and ``seed``. Unknown keys
anywhere are errors: a typo must fail loudly, not fall back to a default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .control import ControlSchedule
from .core_io import ValidationError
from .guidance import GuidanceConfig
from .inversion import TuneConfig
from .scheduler import NoiseSchedule, make_schedule

_SCHEMA: dict[str, Optional[set[str]]] = {
    "seed": None,
    "omega": None,
    "schedule": {"num_train_steps", "beta_start", "beta_end", "num_sampling_steps"},
    "stdg": {
        "enabled",
        "temporal_fg",
        "temporal_bg",
        "spatial_fg",
        "spatial_bg",
        "top_k",
        "blocks",
        "masks",
        "edit_path",
    },
    "control": {"tau_s", "tau_c", "reweight", "renormalize", "enable_sa", "enable_ca"},
    "tune": {"inner_iters", "step_size", "early_stop_loss", "mode"},
}


@dataclass
class Settings:
    seed: int = 0
    omega: float = 1.0
    schedule: dict = field(
        default_factory=lambda: {
            "num_train_steps": 1000,
            "beta_start": 1e-4,
            "beta_end": 2e-2,
            "num_sampling_steps": 20,
        }
    )
    stdg: dict = field(
        default_factory=lambda: {
            "enabled": True,
            "temporal_fg": 0.5,
            "temporal_bg": 0.5,
            "spatial_fg": 0.0,
            "spatial_bg": 0.5,
            "top_k": 2,
            "blocks": None,
            "masks": None,
            "edit_path": True,
        }
    )
    control: dict = field(
        default_factory=lambda: {
            "tau_s": 0.3,
            "tau_c": 0.8,
            "reweight": {},
            "renormalize": False,
            "enable_sa": True,
            "enable_ca": True,
        }
    )
    tune: dict = field(
        default_factory=lambda: {
            "inner_iters": 10,
            "step_size": 0.1,
            "early_stop_loss": 1e-5,
            "mode": "multi_frame",
        }
    )

    def make_noise_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return make_schedule(
            s["num_train_steps"], s["beta_start"], s["beta_end"], s["num_sampling_steps"]
        )

    def guidance_config(self) -> Optional[GuidanceConfig]:
        if not self.stdg["enabled"]:
            return None
        return GuidanceConfig(
            temporal_fg=self.stdg["temporal_fg"],
            temporal_bg=self.stdg["temporal_bg"],
            spatial_fg=self.stdg["spatial_fg"],
            spatial_bg=self.stdg["spatial_bg"],
            top_k=self.stdg["top_k"],
            blocks=self.stdg["blocks"],
        )

    def tune_config(self, masks=None) -> TuneConfig:
        return TuneConfig(
            inner_iters=self.tune["inner_iters"],
            step_size=self.tune["step_size"],
            early_stop_loss=self.tune["early_stop_loss"],
            omega=self.omega,
            stdg=self.guidance_config(),
            masks=masks,
            mode=self.tune["mode"],
        )

    def control_schedule(self, steps: int) -> ControlSchedule:
        return ControlSchedule(
            tau_s=self.control["tau_s"], tau_c=self.control["tau_c"], steps=steps
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "omega": self.omega,
            "schedule": dict(self.schedule),
            "stdg": dict(self.stdg),
            "control": dict(self.control),
            "tune": dict(self.tune),
        }


def settings_from_dict(data: dict[str, Any]) -> Settings:
    unknown = set(data) - set(_SCHEMA)
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    settings = Settings()
    for section, allowed in _SCHEMA.items():
        if section not in data:
            continue
        value = data[section]
        if allowed is None:
            setattr(settings, section, value)
            continue
        if not isinstance(value, dict):
            raise ValidationError(f"config section {section!r} must be an object")
        bad = set(value) - allowed
        if bad:
            raise ValidationError(f"unknown keys in {section!r}: {sorted(bad)}")
        getattr(settings, section).update(value)
    return settings


def load_settings(path) -> Settings:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ValidationError(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(data, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    return settings_from_dict(data)
