"""Epoch-indexed teacher-weight schedules for adaptive self-distillation.

Both alphas and the phase for epoch ``e`` are pure functions of ``e``
evaluated before the epoch runs. Epochs are ``0 .. total_epochs - 1``.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass

from .errors import ConfigError


class Phase(str, enum.Enum):
    AKD = "AKD"
    SKD = "SKD"
    CE = "CE"  # hard labels only (CE baseline, SKD bootstrap epoch)


@dataclass(frozen=True)
class ScheduleConfig:
    alpha_akd_initial: float = 1.0
    alpha_skd_initial: float = 0.8
    lam: float = 0.5
    warmup_epochs: int = 2
    total_epochs: int = 10
    tau: float = 2.0
    alpha_akd_floor: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.lam < self.alpha_akd_initial <= 1.0:
            raise ConfigError("schedule requires 0 < lam < alpha_akd_initial <= 1")
        if not 0.0 <= self.alpha_skd_initial <= 1.0:
            raise ConfigError("alpha_skd_initial must lie in [0, 1]")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("schedule requires 0 <= warmup_epochs < total_epochs")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.alpha_akd_floor < self.alpha_akd_initial:
            raise ConfigError("alpha_akd_floor must lie in [0, alpha_akd_initial)")


@dataclass(frozen=True)
class EpochPlan:
    epoch: int
    phase: Phase
    alpha_akd: float
    alpha_skd: float


def _check_epoch(e: int) -> None:
    if e < 0:
        raise ValueError(f"epoch must be >= 0, got {e}")


def alpha_akd_at(e: int, cfg: ScheduleConfig) -> float:
    """Held at the initial value for the warm-up epochs, then linear decay."""
    _check_epoch(e)
    if e < cfg.warmup_epochs:
        return cfg.alpha_akd_initial
    return max(cfg.alpha_akd_floor, cfg.alpha_akd_initial - (e - cfg.warmup_epochs) / cfg.total_epochs)


def alpha_skd_at(e: int, cfg: ScheduleConfig) -> float:
    _check_epoch(e)
    return min(1.0, cfg.alpha_skd_initial * e / cfg.total_epochs)


# alpha_akd is a float closed form (1 - 7/10 is 0.30000000000000004), so the
# threshold test allows for rounding; otherwise lam=0.3 would never be reached
PHASE_TOL = 1e-9


def phase_at(e: int, cfg: ScheduleConfig) -> Phase:
    _check_epoch(e)
    if e >= cfg.total_epochs:
        raise ValueError(f"epoch {e} is past the last epoch ({cfg.total_epochs - 1})")
    return Phase.AKD if alpha_akd_at(e, cfg) > cfg.lam + PHASE_TOL else Phase.SKD


def trajectory(cfg: ScheduleConfig) -> list[EpochPlan]:
    return [
        EpochPlan(e, phase_at(e, cfg), alpha_akd_at(e, cfg), alpha_skd_at(e, cfg))
        for e in range(cfg.total_epochs)
    ]


def trajectory_csv(cfg: ScheduleConfig) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "phase", "alpha_akd", "alpha_skd"])
    for p in trajectory(cfg):
        w.writerow([p.epoch, p.phase.value, repr(p.alpha_akd), repr(p.alpha_skd)])
    return buf.getvalue()
