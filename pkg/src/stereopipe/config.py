"""Run configuration with published defaults, and its flat text format.

Config files are plain ``key = value`` lines (``#`` comments allowed);
every run writes a resolved snapshot of the full configuration next to
its outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, asdict
from pathlib import Path

from .errors import ConfigurationError


@dataclass
class RunConfig:
    # pipeline
    mode: str = "accurate"  # fast | accurate
    channels: int = 1  # input image planes (1 or 3)
    d_max: int = 32
    seed: int = 0
    inference_dtype: str = "float64"  # float32 allowed for inference paths

    # matching network
    feature_channels: int = 64
    decision_hidden: int = 128
    decision_layers: int = 3
    alpha: float = 0.8
    margin: float = 0.2
    xent_as_printed: bool = True
    neg_offset_min: int = 4
    neg_offset_max: int = 8
    matcher_epochs: int = 14
    matcher_lr: float = 0.003
    matcher_batch_size: int = 128
    momentum: float = 0.9

    # disparity network
    gdn_conv_channels: str = "64,64,64,64"
    gdn_conf_hidden: int = 64
    gdn_epochs: int = 15
    gdn_lr: float = 0.003
    gdn_lr_decimate_epoch: int = 12
    gdn_batch_size: int = 128
    gdn_loss_weight_disparity: float = 0.85
    gdn_loss_weight_confidence: float = 0.15
    smooth_target_w1: float = 0.65
    smooth_target_w2: float = 0.25
    smooth_target_w3: float = 0.1
    gdn_samples: int = 50000

    # cost-volume post-processing
    sgm_p1: float = 1.0
    sgm_p2: float = 8.0
    tau_cbca: float = 0.02
    cbca_l_max: int = 5

    # refinement
    tau1: float = 1.0
    tau2: float = 0.7
    tau3: float = 0.1
    tau4: float = 1.0
    median_size: int = 5
    bilateral_sigma_s: float = 5.0
    bilateral_sigma_r: float = 7.5

    # evaluation
    error_threshold: float = 3.0

    def __post_init__(self):
        if self.mode not in ("fast", "accurate"):
            raise ConfigurationError(f"mode must be fast or accurate, got {self.mode!r}")
        if self.channels not in (1, 3):
            raise ConfigurationError("channels must be 1 or 3")
        if self.inference_dtype not in ("float64", "float32"):
            raise ConfigurationError("inference_dtype must be float64 or float32")
        if not 0.0 <= self.tau2 <= 1.0:
            raise ConfigurationError("tau2 must lie in [0, 1]")
        if self.tau1 < 0 or self.tau4 < 0:
            raise ConfigurationError("tau1 and tau4 must be >= 0")

    @property
    def gdn_conv_channel_list(self):
        return [int(c) for c in str(self.gdn_conv_channels).split(",") if c.strip()]

    def save(self, path):
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        values = {}
        text = Path(path).read_text()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values):
        typed = {}
        by_name = {f.name: f for f in fields(cls)}
        for key, val in values.items():
            if key not in by_name:
                raise ConfigurationError(f"unknown config key {key!r}")
            typ = by_name[key].type
            if isinstance(val, str):
                if typ == "bool" or typ is bool:
                    typed[key] = val.lower() in ("1", "true", "yes", "on")
                elif typ == "int" or typ is int:
                    typed[key] = int(val)
                elif typ == "float" or typ is float:
                    typed[key] = float(val)
                else:
                    typed[key] = val
            else:
                typed[key] = val
        return cls(**typed)

    def replace(self, **overrides):
        merged = asdict(self)
        merged.update(overrides)
        return RunConfig.from_dict(merged)
