"""Nonlinear cartpole simulator with a tunable fixation-point sensor.

The pole is balanced on a cart driven by a horizontal force.  The sensor
reports the horizontal position of a single fixation point at height ell0
along the pole, z = h + ell0 * sin(theta), optionally corrupted by Gaussian
noise calibrated to depth-like or rgb-like perception error.  Dynamics are
integrated with explicit Euler so that the analytic linearization below is
exactly the Jacobian of one simulator step.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .linalg import StateSpaceModel
from .rngtools import substream

__all__ = [
    "PhysicalParams",
    "SimState",
    "SensorSpec",
    "EpisodeConfig",
    "EpisodeResult",
    "Trajectory",
    "SENSOR_TIERS",
    "make_sensor",
    "accelerations",
    "step",
    "observe",
    "linearize",
    "sample_initial_state",
    "run_episode",
    "save_trajectory",
    "load_trajectory",
]

# tier -> noise std as a fraction of the observation range
SENSOR_TIERS = {
    "noise_free": 0.0,
    "depth_like": 0.0003,
    "rgb_like": 0.0025,
}


@dataclass(frozen=True)
class PhysicalParams:
    """Cartpole constants: cart/pole mass, pole length, gravity, step, fixation."""

    M: float = 1.0
    m: float = 0.1
    ell: float = 1.0
    g: float = 9.81
    tau: float = 0.02
    ell0: float = 1.0

    def __post_init__(self):
        if not (self.M > 0 and self.m > 0 and self.ell > 0 and self.tau > 0):
            raise ValueError("masses, length and step size must be positive")
        if not (0 < self.ell0 <= self.ell):
            raise ValueError("fixation point must satisfy 0 < ell0 <= ell")


@dataclass(frozen=True)
class SimState:
    h: float = 0.0
    h_dot: float = 0.0
    theta: float = 0.0
    theta_dot: float = 0.0

    def __post_init__(self):
        for v in (self.h, self.h_dot, self.theta, self.theta_dot):
            if not math.isfinite(v):
                raise ValueError("state entries must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.h, self.h_dot, self.theta, self.theta_dot])

    @classmethod
    def from_array(cls, x) -> "SimState":
        h, h_dot, theta, theta_dot = (float(v) for v in x)
        return cls(h, h_dot, theta, theta_dot)


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 500
    init_halfwidth: float = 0.05
    h_limit: float = 0.6
    theta_limit_deg: float = 15.0
    reference: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.h_limit <= 0 or self.theta_limit_deg <= 0:
            raise ValueError("termination limits must be positive")

    @property
    def theta_limit(self) -> float:
        return math.radians(self.theta_limit_deg)


@dataclass(frozen=True)
class SensorSpec:
    """Observation noise tier; sigma = noise_frac * z_range."""

    tier: str = "noise_free"
    noise_frac: float = 0.0
    z_range: float = 0.0
    rng_stream: str = "sensor"

    @property
    def sigma(self) -> float:
        return self.noise_frac * self.z_range


def make_sensor(
    tier: str,
    params: PhysicalParams,
    config: EpisodeConfig | None = None,
    rng_stream: str = "sensor",
) -> SensorSpec:
    """Sensor for a tier, with z_range set by the termination box.

    The observation range is 2 * (h_limit + ell0 * sin(theta_limit)), the
    extreme spread of z over states inside the termination box.
    """
    if tier not in SENSOR_TIERS:
        raise ValueError(f"unknown sensor tier {tier!r}; choose from {sorted(SENSOR_TIERS)}")
    config = config or EpisodeConfig()
    z_range = 2.0 * (config.h_limit + params.ell0 * math.sin(config.theta_limit))
    return SensorSpec(tier, SENSOR_TIERS[tier], z_range, rng_stream)


@dataclass
class Trajectory:
    """Time-indexed observation/input records, with full states when logged."""

    z: np.ndarray
    u: np.ndarray
    x_full: np.ndarray | None = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float).ravel()
        self.u = np.asarray(self.u, dtype=float).ravel()
        if len(self.z) != len(self.u) or len(self.z) < 1:
            raise ValueError("z and u must have equal length >= 1")
        if self.x_full is not None:
            self.x_full = np.asarray(self.x_full, dtype=float).reshape(len(self.z), -1)

    def __len__(self) -> int:
        return len(self.z)


@dataclass(frozen=True)
class EpisodeResult:
    steps: int
    success: bool
    cause: str
    seed: int

    @property
    def reward(self) -> float:
        return float(self.steps)


def accelerations(params: PhysicalParams, state: SimState, u: float):
    """Cart and pole angular accelerations for force u (reference folded in).

    Solves the 2x2 system
        (M+m) hdd + m*ell*tdd = u + m*ell*td^2*sin(theta)
        cos(theta) hdd + ell*tdd = g*sin(theta)
    which is nonsingular for every admissible parameter set.
    """
    s = math.sin(state.theta)
    c = math.cos(state.theta)
    denom = params.M + params.m * (1.0 - c)
    h_ddot = (u + params.m * params.ell * state.theta_dot**2 * s - params.m * params.g * s) / denom
    theta_ddot = (params.g * s - c * h_ddot) / params.ell
    return h_ddot, theta_ddot


def step(params: PhysicalParams, state: SimState, u: float) -> SimState:
    """One explicit-Euler step; all right-hand sides use the pre-step state."""
    h_ddot, theta_ddot = accelerations(params, state, u)
    return SimState(
        h=state.h + params.tau * state.h_dot,
        h_dot=state.h_dot + params.tau * h_ddot,
        theta=state.theta + params.tau * state.theta_dot,
        theta_dot=state.theta_dot + params.tau * theta_ddot,
    )


def observe(
    params: PhysicalParams,
    state: SimState,
    sensor: SensorSpec,
    rng: np.random.Generator | None = None,
) -> float:
    """Measured fixation-point position y = h + ell0 sin(theta) + noise."""
    y = state.h + params.ell0 * math.sin(state.theta)
    if sensor.sigma > 0.0:
        if rng is None:
            raise ValueError("a noisy sensor needs its RNG substream")
        y += sensor.sigma * rng.standard_normal()
    return y


def linearize(params: PhysicalParams) -> StateSpaceModel:
    """Euler-discretized linearization about the upright equilibrium.

    State ordering (h, h_dot, theta, theta_dot); A_d = I + tau*A_c and
    B_d = tau*B_c match the Jacobian of step() at the origin exactly.
    The output row C = [1, 0, ell0, 0] reads z = h + ell0*theta.
    """
    M, m, ell, g, tau = params.M, params.m, params.ell, params.g, params.tau
    Ac = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, -m * g / M, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, (M + m) * g / (M * ell), 0.0],
        ]
    )
    Bc = np.array([[0.0], [1.0 / M], [0.0], [-1.0 / (M * ell)]])
    A = np.eye(4) + tau * Ac
    B = tau * Bc
    C = np.array([[1.0, 0.0, params.ell0, 0.0]])
    D = np.zeros((1, 1))
    return StateSpaceModel(A, B, C, D, dt=tau)


def sample_initial_state(config: EpisodeConfig, rng: np.random.Generator) -> SimState:
    w = config.init_halfwidth
    return SimState.from_array(rng.uniform(-w, w, size=4))


def run_episode(
    params: PhysicalParams,
    config: EpisodeConfig,
    controller,
    sensor: SensorSpec,
    init_state: SimState | None = None,
):
    """Simulate one episode under a controller.

    The controller is reset, then at each step sees the current measurement y
    and returns the force u.  The episode ends when the cart or angle leaves
    the termination box, when the controller emits a non-finite force, or
    after max_steps.  Reward equals the number of steps survived inside the
    box; success means the full horizon was survived.
    """
    rng_init = substream(config.seed, "init")
    rng_sensor = substream(config.seed, sensor.rng_stream)
    state = init_state if init_state is not None else sample_initial_state(config, rng_init)
    controller.reset()

    zs, us, xs = [], [], []
    steps = 0
    cause = "completed"
    for _ in range(config.max_steps):
        y = observe(params, state, sensor, rng_sensor)
        u = float(controller.act(y))
        zs.append(y)
        us.append(u)
        xs.append(state.as_array())
        if not math.isfinite(u):
            cause = "nonfinite_action"
            break
        state = step(params, state, u + config.reference)
        if abs(state.h) > config.h_limit:
            cause = "h_limit"
            break
        if abs(state.theta) > config.theta_limit:
            cause = "theta_limit"
            break
        steps += 1
    result = EpisodeResult(steps=steps, success=cause == "completed", cause=cause, seed=config.seed)
    traj = Trajectory(z=np.array(zs), u=np.array(us), x_full=np.array(xs))
    return result, traj


_TRAJ_COLUMNS = ("t", "h", "h_dot", "theta", "theta_dot", "u", "y")


def save_trajectory(path, traj: Trajectory, meta: dict | None = None) -> None:
    """Write a trajectory as CSV; optional metadata goes to a JSON sidecar."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_TRAJ_COLUMNS)
        for t in range(len(traj)):
            x = traj.x_full[t] if traj.x_full is not None else [math.nan] * 4
            writer.writerow([t, repr(float(x[0])), repr(float(x[1])), repr(float(x[2])),
                             repr(float(x[3])), repr(float(traj.u[t])), repr(float(traj.z[t]))])
    if meta is not None:
        with open(str(path) + ".meta.json", "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")


def load_trajectory(path) -> Trajectory:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != _TRAJ_COLUMNS:
            raise ValueError(f"unexpected trajectory columns {header}")
        rows = [[float(v) for v in row] for row in reader]
    arr = np.array(rows)
    x_full = arr[:, 1:5]
    if np.isnan(x_full).any():
        x_full = None
    return Trajectory(z=arr[:, 6], u=arr[:, 5], x_full=x_full)


def episode_metadata(params: PhysicalParams, config: EpisodeConfig,
                     sensor: SensorSpec, result: EpisodeResult) -> dict:
    return {
        "params": asdict(params),
        "config": asdict(config),
        "sensor": {"tier": sensor.tier, "noise_frac": sensor.noise_frac,
                   "z_range": sensor.z_range},
        "result": asdict(result),
    }
