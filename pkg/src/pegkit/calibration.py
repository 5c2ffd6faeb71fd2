"""Learned command-to-physical dynamics models and iterative command compensation.

The controller cannot observe the plant's physical joint positions online, so
tracking accuracy comes from a model learned offline on (command history,
physical position) pairs and inverted at runtime by fixed-point iteration
(``compensate``): pick the command whose predicted outcome is the desired
position.

The model is a recurrent hysteresis cell: a per-joint bias head for the arm
and roll joints plus a play (backlash) state for each wrist joint that is
unrolled over the window of recent commands. All parameters are estimated
from data by minimizing per-joint-normalized mean squared error, so the same
code calibrates any plant in the family (including the degenerate identity
and pure-offset plants).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .cable_plant import CablePlant, random_smooth_commands
from .errors import Diverged, EmptyInput
from .kinematics import JointLimits

DEFAULT_WINDOW = 5
DEFAULT_ITERATIONS = 10
DEFAULT_ALPHA = 0.5
_SCALE_FLOOR = 1e-9

# theta layout: [bias1, bias2, bias3, offset4, w5, w6, couple_56, couple_65]
_N_PARAMS = 8


class CommandHistory:
    """Ring buffer of the most recently issued joint commands (oldest first)."""

    def __init__(self, window: int, q_initial):
        if window < 1:
            raise ValueError("window must be >= 1")
        q0 = np.asarray(q_initial, dtype=float)
        if q0.shape != (6,):
            raise ValueError("q_initial must have shape (6,)")
        self._buf = np.tile(q0, (window, 1))

    @property
    def window(self) -> int:
        return self._buf.shape[0]

    def push(self, q_command) -> None:
        q = np.asarray(q_command, dtype=float)
        self._buf[:-1] = self._buf[1:]
        self._buf[-1] = q

    def snapshot(self) -> np.ndarray:
        """(window, 6) array, oldest row first."""
        return self._buf.copy()


@dataclass(frozen=True)
class Dataset:
    """Time-ordered (command, physical) pairs sampled at a fixed interval."""

    commands: np.ndarray   # (n, 6) issued commands
    physical: np.ndarray   # (n, 6) measured physical positions
    interval: float        # seconds between consecutive samples

    def __post_init__(self):
        c = np.asarray(self.commands, dtype=float)
        p = np.asarray(self.physical, dtype=float)
        if c.ndim != 2 or c.shape[1] != 6 or c.shape != p.shape:
            raise ValueError("commands and physical must both be (n, 6)")
        if self.interval <= 0:
            raise ValueError("interval must be positive")
        object.__setattr__(self, "commands", c)
        object.__setattr__(self, "physical", p)

    def __len__(self) -> int:
        return self.commands.shape[0]


def collect_random_smooth(
    plant: CablePlant,
    limits: JointLimits,
    n_points: int,
    interval: float = 0.8,
    seed: int = 0,
) -> Dataset:
    """Drive the plant with a smoothed random walk and record the outcomes."""
    if n_points < 100:
        raise ValueError("n_points must be >= 100")
    commands = random_smooth_commands(limits, n_points, seed=seed)
    plant.reset(q_initial=commands[0])
    physical = np.array([plant.step(c) for c in commands])
    return Dataset(commands=commands, physical=physical, interval=interval)


def _window_rows(commands: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """(rows, time_index): rows[t] = commands[t-window .. t], oldest first."""
    n = commands.shape[0]
    if n <= window:
        raise EmptyInput(f"need more than {window} samples, got {n}")
    idx = np.arange(window, n)
    rows = np.stack([commands[idx - (window - j)] for j in range(window + 1)], axis=1)
    return rows, idx


def _cell_forward(rows: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Vectorized model output for (n, window+1, 6) command rows.

    The wrist play states start at the oldest command, offset by the play
    half-width against the window's net drift direction (a freshly-issued
    monotone motion leaves the transmission loaded that way), then are
    dragged through the play operator across the window. Whenever the window
    itself sweeps more than the play width the clipping overwrites the
    initial guess, so the prior only matters for near-stationary windows.
    """
    bias = theta[:3]
    offset4, w5, w6, c56, c65 = theta[3], theta[4], theta[5], theta[6], theta[7]
    u5 = rows[..., 4]
    u6 = rows[..., 5]
    d5 = np.sign(u5[..., -1] - u5[..., 0])
    d6 = np.sign(u6[..., -1] - u6[..., 0])
    y5 = u5[..., 0] - w5 * d5
    y6 = u6[..., 0] - w6 * d6
    for j in range(1, rows.shape[-2]):
        y5 = np.clip(y5, u5[..., j] - w5, u5[..., j] + w5)
        y6 = np.clip(y6, u6[..., j] - w6, u6[..., j] + w6)
    current = rows[..., -1, :]
    pred = current.copy()
    pred[..., :3] += bias
    pred[..., 3] += offset4
    pred[..., 4] = y5 + c56 * (current[..., 5] - y6)
    pred[..., 5] = y6 + c65 * (current[..., 4] - y5)
    return pred


@dataclass(frozen=True)
class DynamicsModel:
    """Recurrent hysteresis cell predicting physical joints from recent commands.

    ``theta`` = [arm bias (3), roll offset, play half-width q5, play
    half-width q6, coupling q6-into-q5, coupling q5-into-q6].
    ``residual_scale`` holds the per-joint normalization constants used for
    the training loss (so meter- and radian-valued joints weigh equally).
    """

    window: int
    theta: np.ndarray           # (8,)
    residual_scale: np.ndarray  # (6,)

    def __post_init__(self):
        t = np.asarray(self.theta, dtype=float)
        if t.shape != (_N_PARAMS,):
            raise ValueError(f"theta must have shape ({_N_PARAMS},)")
        object.__setattr__(self, "theta", t)
        object.__setattr__(self, "residual_scale",
                           np.asarray(self.residual_scale, dtype=float))

    def predict(self, q_command, history) -> np.ndarray:
        """Predicted physical joint vector for issuing ``q_command`` now."""
        q = np.asarray(q_command, dtype=float)
        hist = history.snapshot() if isinstance(history, CommandHistory) \
            else np.asarray(history, dtype=float)
        if hist.shape != (self.window, 6):
            raise ValueError(f"history must be ({self.window}, 6), got {hist.shape}")
        row = np.vstack([hist, q[None, :]])
        return _cell_forward(row[None, :, :], self.theta)[0]

    def predict_rows(self, rows: np.ndarray) -> np.ndarray:
        """Batch predict on (n, window+1, 6) command rows (oldest first)."""
        return _cell_forward(rows, self.theta)


@dataclass(frozen=True)
class TrainReport:
    """Holdout accuracy of a trained model next to the uncompensated baseline."""

    holdout_rmse: np.ndarray    # (6,) model prediction error on held-out tail
    baseline_rmse: np.ndarray   # (6,) |physical - command| on the same tail
    n_train: int
    n_holdout: int
    final_loss: float           # normalized train MSE at the optimum


def train(
    dataset: Dataset,
    window: int = DEFAULT_WINDOW,
    holdout_fraction: float = 0.15,
    play_grid_max: float = 0.4,
    play_grid_step: float = 0.02,
) -> tuple[DynamicsModel, TrainReport]:
    """Fit the hysteresis-cell model on the leading part of ``dataset``.

    The holdout is the trailing ``holdout_fraction`` of the time series, so
    train and holdout never interleave. Fitting is deterministic: a coarse
    grid over the two play widths seeds a bounded least-squares polish of
    all parameters. Raises ``Diverged`` if the training loss is non-finite.
    """
    rows, idx = _window_rows(dataset.commands, window)
    targets = dataset.physical[idx]
    n = rows.shape[0]
    n_holdout = max(1, int(round(n * holdout_fraction)))
    n_train = n - n_holdout
    if n_train < 10:
        raise EmptyInput("dataset too small to split for training")

    train_rows, train_targets = rows[:n_train], targets[:n_train]
    scale = np.maximum((train_targets - train_rows[:, -1]).std(axis=0), _SCALE_FLOOR)

    def residual(theta):
        return ((_cell_forward(train_rows, theta) - train_targets) / scale).ravel()

    offset0 = float(np.mean(train_targets[:, 3] - train_rows[:, -1, 3]))
    grid = np.arange(0.0, play_grid_max + play_grid_step / 2, play_grid_step)
    best = (np.inf, 0.0, 0.0)
    for w5 in grid:
        for w6 in grid:
            r = residual(np.array([0.0, 0.0, 0.0, offset0, w5, w6, 0.0, 0.0]))
            v = float(r @ r)
            if v < best[0]:
                best = (v, w5, w6)
    theta0 = np.array([0.0, 0.0, 0.0, offset0, best[1], best[2], 0.0, 0.0])
    lower = [-np.inf] * 4 + [0.0, 0.0, -1.0, -1.0]
    upper = [np.inf] * 4 + [play_grid_max * 2.5, play_grid_max * 2.5, 1.0, 1.0]
    solution = least_squares(residual, theta0, bounds=(lower, upper))
    final_loss = float(np.mean(solution.fun ** 2))
    if not np.isfinite(final_loss):
        raise Diverged(f"training loss is not finite: {final_loss}")

    model = DynamicsModel(window=window, theta=solution.x, residual_scale=scale)
    holdout_pred = model.predict_rows(rows[n_train:])
    holdout_rmse = np.sqrt(np.mean((holdout_pred - targets[n_train:]) ** 2, axis=0))
    baseline_rmse = np.sqrt(
        np.mean((targets[n_train:] - rows[n_train:, -1]) ** 2, axis=0))
    report = TrainReport(holdout_rmse=holdout_rmse, baseline_rmse=baseline_rmse,
                         n_train=n_train, n_holdout=n_holdout,
                         final_loss=final_loss)
    return model, report


def untrained_model(dataset: Dataset, window: int = DEFAULT_WINDOW,
                    seed: int = 0) -> DynamicsModel:
    """Randomly initialized model of the trained models' shape and scaling.

    The no-learning reference point for demonstrating that training actually
    reduces holdout error.
    """
    rng = np.random.default_rng(seed)
    theta = np.concatenate([
        rng.normal(0.0, 0.01, size=3),
        rng.normal(0.0, 0.2, size=1),
        rng.uniform(0.0, 0.3, size=2),
        rng.uniform(-0.3, 0.3, size=2),
    ])
    scale = np.maximum((dataset.physical - dataset.commands).std(axis=0), _SCALE_FLOOR)
    return DynamicsModel(window=window, theta=theta, residual_scale=scale)


def holdout_mse(model: DynamicsModel, dataset: Dataset,
                holdout_fraction: float = 0.15) -> float:
    """Normalized holdout MSE of ``model`` on the trailing split of ``dataset``."""
    rows, idx = _window_rows(dataset.commands, model.window)
    targets = dataset.physical[idx]
    n = rows.shape[0]
    n_holdout = max(1, int(round(n * holdout_fraction)))
    pred = model.predict_rows(rows[n - n_holdout:])
    err = (pred - targets[n - n_holdout:]) / model.residual_scale
    return float(np.mean(err ** 2))


def compensate(
    model: DynamicsModel,
    q_desired,
    history,
    iterations: int = DEFAULT_ITERATIONS,
    alpha: float = DEFAULT_ALPHA,
    limits: JointLimits | None = None,
) -> np.ndarray:
    """Pick the command whose predicted physical outcome is ``q_desired``.

    Runs exactly ``iterations`` fixed-point updates
    ``q_c <- q_c + alpha * (q_desired - predict(q_c, history))`` starting
    from ``q_c = q_desired``. ``history`` is read, never modified. When
    ``limits`` is given, the iterate is clipped to the joint limits after
    each update (a controller may only issue commands inside them).
    """
    q_d = np.asarray(q_desired, dtype=float)
    hist = history.snapshot() if isinstance(history, CommandHistory) \
        else np.asarray(history, dtype=float)
    q_c = q_d.copy()
    for _ in range(iterations):
        q_c = q_c + alpha * (q_d - model.predict(q_c, hist))
        if limits is not None:
            q_c = limits.clip(q_c)
    return q_c


def evaluate_closed_loop(
    plant: CablePlant,
    model: DynamicsModel,
    targets: np.ndarray,
    iterations: int = DEFAULT_ITERATIONS,
    alpha: float = DEFAULT_ALPHA,
) -> np.ndarray:
    """Per-joint RMSE between targets and plant output under compensation.

    Resets the plant to the first target, then for each target compensates,
    issues the command, and compares the plant's physical position to the
    target.
    """
    targets = np.asarray(targets, dtype=float)
    if targets.ndim != 2 or targets.shape[1] != 6:
        raise ValueError("targets must be (n, 6)")
    if targets.shape[0] == 0:
        raise EmptyInput("no targets")
    plant.reset(q_initial=targets[0])
    history = CommandHistory(model.window, targets[0])
    err = np.empty_like(targets)
    for i, q_d in enumerate(targets):
        q_c = compensate(model, q_d, history, iterations=iterations, alpha=alpha)
        history.push(q_c)
        err[i] = plant.step(q_c) - q_d
    return np.sqrt(np.mean(err ** 2, axis=0))


def evaluate_uncompensated(plant: CablePlant, targets: np.ndarray) -> np.ndarray:
    """Per-joint RMSE when targets are issued directly as commands."""
    targets = np.asarray(targets, dtype=float)
    if targets.shape[0] == 0:
        raise EmptyInput("no targets")
    plant.reset(q_initial=targets[0])
    err = np.array([plant.step(q) - q for q in targets])
    return np.sqrt(np.mean(err ** 2, axis=0))
