"""Stealthy false data injection: a = H c built from targeted state biases."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_case import MeasurementModel

__all__ = ["AttackError", "AttackSpec", "AttackVector", "craft_fdia", "apply_attack"]


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    target_buses: frozenset[int]
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "target_buses", frozenset(int(b) for b in self.target_buses))
        if not self.target_buses:
            raise AttackError("an attack needs at least one target bus")
        if not self.scale > 0:
            raise AttackError(f"scale must be positive, got {self.scale}")
        if self.scale == 1:
            raise AttackError("scale 1 is not an attack")


@dataclass(frozen=True, eq=False)
class AttackVector:
    a: np.ndarray
    c: np.ndarray
    label: int = 0


def craft_fdia(model: MeasurementModel, x_hat, spec: AttackSpec, label: int = 0) -> AttackVector:
    """Shift each targeted state to ``scale`` times its estimate.

    The returned measurement perturbation lies in the column space of H, so a
    WLS estimator run on ``z + a`` moves by exactly ``c`` and the residual is
    untouched.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    if x_hat.shape != (model.n_states,):
        raise AttackError(f"state vector has shape {x_hat.shape}, expected ({model.n_states},)")
    if not np.all(np.isfinite(x_hat)):
        raise AttackError("state estimate is not finite")
    if model.slack_bus in spec.target_buses:
        raise AttackError(f"bus {model.slack_bus} is the slack bus and cannot be attacked")
    c = np.zeros(model.n_states)
    for bus in sorted(spec.target_buses):
        try:
            j = model.state_index.index(bus)
        except ValueError:
            raise AttackError(f"unknown target bus {bus}") from None
        if x_hat[j] == 0.0:
            raise AttackError(f"state at bus {bus} is exactly zero; scaling it would be a null attack")
        c[j] = (spec.scale - 1.0) * x_hat[j]
    return AttackVector(model.h @ c, c, label)


def apply_attack(z, atk: AttackVector) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != atk.a.shape[0]:
        raise AttackError(f"measurement length {z.shape[-1]} != attack length {atk.a.shape[0]}")
    return z + atk.a
