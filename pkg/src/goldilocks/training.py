"""Adam and training loops in the full space or on a chart."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import NetworkArchitecture, loss_and_gradient
from .datasets import Dataset, batch_iterator
from .errors import InputError, NumericalError, NumericalRangeError
from .geometry import SubspaceChart, normalized_radius

TRAJECTORY_COLUMNS = ("step", "train_loss", "eval_loss", "eval_accuracy", "rho")


@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(0, np.zeros(n), np.zeros(n), **hyper)

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps_hat": self.eps_hat}


def adam_step(state: AdamState, coords, gradient) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update; returns new state and coordinates."""
    g = np.asarray(gradient, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if g.shape != coords.shape or g.shape != state.m.shape:
        raise InputError(f"shape mismatch: coords {coords.shape}, gradient {g.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite gradient passed to Adam")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = coords - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    return replace(state, step=t, m=m, v=v), new


@dataclass
class TrajectoryPoint:
    step: int
    train_loss: float
    eval_loss: float
    eval_accuracy: float
    rho: float


@dataclass
class TrainTrajectory:
    points: list[TrajectoryPoint] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list, repr=False)
    final: np.ndarray | None = field(default=None, repr=False)
    final_params: np.ndarray | None = field(default=None, repr=False)
    diverged: bool = False
    diverged_step: int | None = None

    @property
    def steps(self) -> list[int]:
        return [p.step for p in self.points]

    @property
    def initial(self) -> TrajectoryPoint:
        return self.points[0]

    @property
    def last(self) -> TrajectoryPoint:
        return self.points[-1]


class _Streamer:
    """Appends trajectory rows to a CSV file as they are produced."""

    def __init__(self, path):
        self.path = None if path is None else Path(path)
        if self.path is not None:
            new = not self.path.exists() or self.path.stat().st_size == 0
            self.fh = open(self.path, "a", newline="")
            self.writer = csv.writer(self.fh)
            if new:
                self.writer.writerow(TRAJECTORY_COLUMNS)
                self.fh.flush()

    def write(self, point: TrajectoryPoint):
        if self.path is not None:
            self.writer.writerow([point.step, repr(point.train_loss), repr(point.eval_loss),
                                  repr(point.eval_accuracy), repr(point.rho)])
            self.fh.flush()

    def close(self):
        if self.path is not None:
            self.fh.close()


def _run(arch, data, to_params, pullback, coords, steps, batch_size, eval_every, seed,
         adam_hyper, eval_size, scheme, csv_path):
    if steps < 0:
        raise InputError("steps must be nonnegative")
    if eval_every < 1:
        raise InputError("eval_every must be positive")
    eval_batch = data.eval_batch(eval_size) if data.eval_idx.size else data.train_batch(eval_size)
    batches = batch_iterator(data.train_idx, batch_size, seed)
    state = AdamState.zeros(coords.size, **adam_hyper)
    traj = TrainTrajectory()
    stream = _Streamer(csv_path)

    def record(step, train_loss, x):
        ev = loss_and_gradient(arch, x, eval_batch)
        point = TrajectoryPoint(step, float(train_loss), ev.loss, ev.accuracy,
                                normalized_radius(x, arch, scheme))
        traj.points.append(point)
        stream.write(point)

    try:
        x = to_params(coords)
        first = loss_and_gradient(arch, x, data.batch(next(batches)))
        pending = first
        record(0, first.loss, x)
        for step in range(1, steps + 1):
            lg = pending if pending is not None else loss_and_gradient(arch, x, data.batch(next(batches)))
            pending = None
            if not math.isfinite(lg.loss):
                raise NumericalRangeError(f"non-finite training loss at step {step}")
            traj.train_losses.append(lg.loss)
            state, coords = adam_step(state, coords, pullback(coords, x, lg.gradient))
            if not np.all(np.isfinite(coords)):
                raise NumericalRangeError(f"coordinates overflowed at step {step}")
            x = to_params(coords)
            if step % eval_every == 0 or step == steps:
                record(step, lg.loss, x)
    except NumericalError:
        traj.diverged = True
        traj.diverged_step = state.step + 1
    finally:
        stream.close()
    traj.final = coords
    traj.final_params = x
    return traj


def train_subspace(arch: NetworkArchitecture, chart: SubspaceChart, data: Dataset, steps: int,
                   batch_size: int = 128, eval_every: int = 100, seed: int = 0,
                   lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps_hat: float = 1e-8,
                   eval_size: int | None = None, scheme: str = "xavier", csv_path=None) -> TrainTrajectory:
    """Adam on the chart coordinates, starting from ``theta = 0``."""
    return _run(
        arch, data, chart.embed, lambda theta, x, g: chart.pullback(theta, g), np.zeros(chart.d),
        steps, batch_size, eval_every, seed,
        {"lr": lr, "beta1": beta1, "beta2": beta2, "eps_hat": eps_hat}, eval_size, scheme, csv_path,
    )


def train_fullspace(arch: NetworkArchitecture, init_params, data: Dataset, steps: int,
                    batch_size: int = 128, eval_every: int = 100, seed: int = 0,
                    lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps_hat: float = 1e-8,
                    eval_size: int | None = None, scheme: str = "xavier", csv_path=None) -> TrainTrajectory:
    """Adam over every weight and bias."""
    return _run(
        arch, data, lambda c: c, lambda c, x, g: g, np.array(init_params, dtype=np.float64),
        steps, batch_size, eval_every, seed,
        {"lr": lr, "beta1": beta1, "beta2": beta2, "eps_hat": eps_hat}, eval_size, scheme, csv_path,
    )
