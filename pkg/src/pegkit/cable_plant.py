"""Simulated cable-driven transmission between commanded and physical joints.

The arm joints (q1-q3) track their commands up to a small constant bias plus
i.i.d. Gaussian noise.  The instrument wrist misbehaves the way worn cable
drives do: the roll joint q4 carries a constant offset, and the wrist pitch
and yaw (q5, q6) pass through a play (backlash) operator with linear
cross-coupling between the two cables.

The play operator is rate independent:

    play(y, u, w) = max(u - w, min(u + w, y))

so the internal state ``y`` only moves once the command ``u`` drags it by more
than the half-width ``w``, and holding a command still never moves it.
"""

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class PlantParams:
    """Transmission error parameters.

    sigma_arm / bias_arm apply to q1-q3 (rad, rad, m); offset4 to the roll
    joint; w5/w6 are play half-widths (rad); couple_56 scales how much of
    q6's play error leaks into q5 (and vice versa for couple_65).
    """

    sigma_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    offset4: float = 0.0
    w5: float = 0.0
    w6: float = 0.0
    couple_56: float = 0.0
    couple_65: float = 0.0


def play(y, u, w):
    """Rate-independent play (backlash) operator update."""
    return max(u - w, min(u + w, y))


@dataclass
class PlantState:
    y5: float = 0.0
    y6: float = 0.0


class CablePlant:
    """Steps commanded joints through the transmission-error model."""

    def __init__(self, params, seed=0):
        self.params = params
        self.seed = seed
        self.reset()

    def reset(self, q_initial=None):
        """Reset RNG and play states (to ``q_initial``'s wrist if given)."""
        self._rng = np.random.default_rng(self.seed)
        if q_initial is None:
            self.state = PlantState()
        else:
            self.state = PlantState(y5=float(q_initial[4]), y6=float(q_initial[5]))

    def step(self, q_command):
        """Advance one control tick; returns the physical joint vector."""
        q = np.asarray(q_command, dtype=float)
        p = self.params
        out = np.empty(6)
        out[:3] = q[:3] + p.bias_arm + self._rng.normal(0.0, 1.0, 3) * p.sigma_arm
        out[3] = q[3] + p.offset4
        self.state.y5 = play(self.state.y5, q[4], p.w5)
        self.state.y6 = play(self.state.y6, q[5], p.w6)
        out[4] = self.state.y5 + p.couple_56 * (q[5] - self.state.y6)
        out[5] = self.state.y6 + p.couple_65 * (q[4] - self.state.y5)
        return out


@dataclass(frozen=True)
class ErrorStats:
    """Per-joint tracking-error statistics over a command sequence."""

    rmse: np.ndarray
    sd: np.ndarray
    max_abs: np.ndarray


def characterize(plant, commands):
    """Replay ``commands`` (n, 6) through a fresh plant state; error stats."""
    plant.reset(q_initial=commands[0])
    errors = np.vstack([plant.step(q) - q for q in np.asarray(commands, float)])
    return ErrorStats(rmse=np.sqrt(np.mean(errors ** 2, axis=0)),
                      sd=np.std(errors, axis=0),
                      max_abs=np.abs(errors).max(axis=0))


def random_smooth_commands(limits, n, seed=0, smoothing=0.8, step_scale=1.5):
    """Low-pass-filtered random walk covering the joint box.

    Each joint takes Gaussian steps (scaled to its range), reflects off its
    limits, then is smoothed by a first-order low-pass filter, which is the
    kind of excitation a hand-guided data-collection pass produces.
    """
    rng = np.random.default_rng(seed)
    span = limits.hi - limits.lo
    walk = np.empty((n, 6))
    x = limits.lo + span * rng.uniform(0.25, 0.75, 6)
    for t in range(n):
        x = x + rng.normal(0.0, 1.0, 6) * span * step_scale
        # reflect into the box
        for j in range(6):
            if x[j] < limits.lo[j]:
                x[j] = 2 * limits.lo[j] - x[j]
            if x[j] > limits.hi[j]:
                x[j] = 2 * limits.hi[j] - x[j]
            x[j] = min(max(x[j], limits.lo[j]), limits.hi[j])
        walk[t] = x
    smooth = np.empty_like(walk)
    acc = walk[0]
    for t in range(n):
        acc = acc + smoothing * (walk[t] - acc)
        smooth[t] = acc
    return smooth


# Preset parameter sets reproducing the error scales of two worn production
# arms: arm-joint noise uses the measured per-joint SDs directly; the wrist
# play/coupling parameters are tuned offline so the wrist RMSE on the
# standard random-smooth command set lands within +-30% of the measured
# wrist RMSE.
def preset_psm1():
    return PlantParams(
        sigma_arm=np.array([0.0012, 0.00068, 0.000086]),
        offset4=0.16,
        w5=0.186, w6=0.235,
        couple_56=0.2, couple_65=0.2,
    )


def preset_psm2():
    return PlantParams(
        sigma_arm=np.array([0.0017, 0.0022, 0.00030]),
        offset4=0.26,
        w5=0.164, w6=0.186,
        couple_56=0.2, couple_65=0.2,
    )
