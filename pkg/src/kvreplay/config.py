"""Replay policy configuration surface."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import ConfigError

POLICIES = ("full", "local_window", "streaming", "h2o", "roco", "d2o")


@dataclass(frozen=True)
class CachePolicyConfig:
    """Hyperparameters shared by every replay policy.

    Baselines read only the fields they need: `full` ignores everything,
    `local_window` uses the budget fraction alone, `streaming` adds the sink
    count, `h2o`/`roco` add the top:recent ratio, and `d2o` uses the whole
    surface (gate + alpha for per-layer budgets, beta + merge_enabled for
    the merge stage).
    """

    policy: str = "d2o"
    budget_fraction: float = 0.2          # r: cache budget as a fraction of prompt length
    ratio: tuple[int, int] = (3, 1)       # N:M split between top-scored and recent tokens
    sink_tokens: int = 4                  # T: always-kept leading tokens
    gate: float = 100.0                   # g: density variance threshold
    alpha: float = 2.0                    # budget multiplier for dense (low-variance) layers
    beta: float = 0.7                     # EMA smoothing for the merge threshold
    merge_enabled: bool = True
    seed: int = 0

    def validate(self) -> "CachePolicyConfig":
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; choose from {POLICIES}")
        if not (0.0 < self.budget_fraction <= 1.0):
            raise ConfigError(f"budget fraction r must be in (0, 1], got {self.budget_fraction}")
        n, m = self.ratio
        if not (isinstance(n, int) and isinstance(m, int) and n >= 1 and m >= 1):
            raise ConfigError(f"ratio must be a pair of positive integers, got {self.ratio}")
        if self.sink_tokens < 0:
            raise ConfigError(f"sink token count must be >= 0, got {self.sink_tokens}")
        if self.gate < 0.0:
            raise ConfigError(f"gate must be >= 0, got {self.gate}")
        if self.alpha < 1.0:
            raise ConfigError(f"alpha must be >= 1, got {self.alpha}")
        if not (0.0 <= self.beta <= 1.0):
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        return self

    def with_policy(self, policy: str) -> "CachePolicyConfig":
        return replace(self, policy=policy)
