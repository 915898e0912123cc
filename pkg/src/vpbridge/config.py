"""Solver / optimizer hyperparameters shared by the bridge, trainer, and editor."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigurationError


@dataclass
class BridgeConfig:
    """Everything a reproducible run needs besides weights and data.

    The flags past `seed` select between documented interpretation variants;
    defaults match the reference behavior.
    """

    T: int = 50                    # bridge steps
    N: int = 50                    # optimization epochs
    w: float = 7.5                 # guidance scale
    tau: float = 0.7               # attention injection threshold
    gamma: float = 1e-3            # embedding learning rate
    y: int = 4                     # learnable token count
    beta_temperature: float = 1.0  # per-step loss weight temperature
    renormalize_rows: bool = True  # renormalize merged attention rows
    seed: int = 0

    cfg_in_inversion: bool = True    # apply guidance on the inversion leg too
    tau_normalized: bool = True      # tau compares against t/T (else raw step index)
    post_update_advance: bool = True # advance the state with the refreshed prediction
    injection_enabled: bool = True   # differential attention control on/off
    beta_raw_time: bool = False      # weight exp(temp*(t-T)) over diffusion time t
    init_mode: str = "descriptor"    # "descriptor" | "gaussian"
    init_sigma: float = 0.02         # stddev for gaussian init
    allow_model_mismatch: bool = False

    def __post_init__(self):
        if self.T < 1 or self.N < 1:
            raise ConfigurationError("T and N must be positive")
        if self.w < 0:
            raise ConfigurationError("guidance scale w must be >= 0")
        if self.tau_normalized and not 0.0 <= self.tau <= 1.0:
            raise ConfigurationError("tau must lie in [0, 1]")
        if self.gamma <= 0:
            raise ConfigurationError("learning rate gamma must be positive")
        if self.y < 0:
            raise ConfigurationError("y must be >= 0")
        if self.beta_temperature < 0:
            raise ConfigurationError("beta_temperature must be >= 0")
        if self.init_mode not in ("descriptor", "gaussian"):
            raise ConfigurationError(f"unknown init_mode {self.init_mode!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BridgeConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "BridgeConfig":
        return dataclasses.replace(self, **changes)
