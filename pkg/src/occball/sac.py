"""Soft actor-critic over fixed-length measurement histories.

The agent state is the window of the last H sensor readings.  Policy and
twin critics are small dense networks whose forward and reverse passes are
written out explicitly for this fixed architecture; an adaptive-moment
optimizer drives the updates and finite-difference checks in the test suite
guard every gradient.  Training is single threaded and fully determined by
the seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cartpole import (
    EpisodeConfig,
    PhysicalParams,
    SensorSpec,
    observe,
    sample_initial_state,
    step,
)
from .controllers import Controller
from .rngtools import substream, substream_seed

__all__ = [
    "SacConfig",
    "Mlp",
    "GaussianPolicy",
    "SacAgent",
    "ReplayBuffer",
    "TrainResult",
    "make_history_state",
    "policy_act",
    "sac_update",
    "train",
    "PolicyController",
    "save_policy",
    "load_policy",
]

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0


@dataclass(frozen=True)
class SacConfig:
    history_len: int = 200
    alpha: float = 0.2
    tau_target: float = 0.005
    gamma_discount: float = 0.99
    learning_rate: float = 3e-4
    hidden_widths: tuple = (256, 256)
    batch_size: int = 256
    buffer_capacity: int = 1_000_000
    action_limit: float = 10.0
    updates_per_step: int = 1
    warmup_steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.history_len < 1:
            raise ValueError("history_len must be >= 1")
        if not 0 < self.tau_target <= 1:
            raise ValueError("tau_target must lie in (0, 1]")
        if not 0 < self.gamma_discount < 1:
            raise ValueError("gamma_discount must lie in (0, 1)")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def make_history_state(observations, H: int) -> np.ndarray:
    """Last H observations, oldest first, left-padded with the first one."""
    obs = np.asarray(observations, dtype=float).ravel()
    if len(obs) < 1:
        raise ValueError("need at least one observation")
    if len(obs) >= H:
        return obs[-H:].copy()
    return np.concatenate([np.full(H - len(obs), obs[0]), obs])


class Mlp:
    """Dense network with ReLU hidden layers and a linear output layer."""

    def __init__(self, sizes, rng: np.random.Generator, dtype=np.float32):
        self.sizes = tuple(int(s) for s in sizes)
        self.dtype = dtype
        self.Ws = []
        self.bs = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.Ws.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
            self.bs.append(rng.uniform(-bound, bound, fan_out).astype(dtype))

    def parameters(self):
        out = []
        for W, b in zip(self.Ws, self.bs):
            out.append(W)
            out.append(b)
        return out

    def copy(self) -> "Mlp":
        clone = object.__new__(Mlp)
        clone.sizes = self.sizes
        clone.dtype = self.dtype
        clone.Ws = [W.copy() for W in self.Ws]
        clone.bs = [b.copy() for b in self.bs]
        return clone

    def forward(self, x: np.ndarray, need_cache: bool = False):
        a = np.asarray(x, dtype=self.dtype)
        cache = [a] if need_cache else None
        last = len(self.Ws) - 1
        for i, (W, b) in enumerate(zip(self.Ws, self.bs)):
            z = a @ W + b
            a = z if i == last else np.maximum(z, 0.0)
            if need_cache:
                cache.append(z)
                if i != last:
                    cache.append(a)
        return (a, cache) if need_cache else a

    def backward(self, cache, dy: np.ndarray, with_param_grads: bool = True):
        """Gradients for forward(x); returns (param_grads, dx).

        cache layout: [a0, z1, a1, z2, a2, ..., z_last]; dy matches the
        output.  param_grads aligns with parameters(); pass
        with_param_grads=False when only dx is needed.
        """
        grads = [None] * (2 * len(self.Ws)) if with_param_grads else None
        dz = np.asarray(dy, dtype=self.dtype)
        last = len(self.Ws) - 1
        for i in range(last, -1, -1):
            a_prev = cache[2 * i]
            if i != last:
                z = cache[2 * i + 1]
                dz = dz * (z > 0)
            if with_param_grads:
                grads[2 * i] = a_prev.T @ dz
                grads[2 * i + 1] = dz.sum(axis=0)
            dz = dz @ self.Ws[i].T
        return grads, dz


class _Adam:
    def __init__(self, params, lr: float):
        self.lr = lr
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def update(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = g.astype(p.dtype)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def _log_std_from_raw(raw):
    return LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (np.tanh(raw) + 1.0)


def _softplus(x):
    return np.logaddexp(0.0, x)


class GaussianPolicy:
    """Squashed-Gaussian policy head on an Mlp trunk.

    The network maps a history vector to (mean, raw log-std); the log-std is
    rescaled smoothly into [LOG_STD_MIN, LOG_STD_MAX] and actions are
    action_limit * tanh(sample), with the matching change-of-variables
    correction in the log density.
    """

    def __init__(self, history_len, hidden_widths, action_limit, rng, dtype=np.float32):
        self.net = Mlp((history_len,) + tuple(hidden_widths) + (2,), rng, dtype)
        self.action_limit = float(action_limit)
        # start the policy near unit standard deviation: bias the raw
        # log-std head to the preimage of log_std = 0 under the rescaling
        self.net.bs[-1][1] = np.arctanh(
            2.0 * (0.0 - LOG_STD_MIN) / (LOG_STD_MAX - LOG_STD_MIN) - 1.0
        )

    def heads(self, states, need_cache=False):
        if need_cache:
            out, cache = self.net.forward(states, need_cache=True)
        else:
            out = self.net.forward(states)
            cache = None
        mu = out[:, 0]
        raw = out[:, 1]
        return mu, raw, cache

    def sample(self, states, xi):
        """Reparameterized actions and their log densities for noise xi."""
        mu, raw, _ = self.heads(states)
        log_std = _log_std_from_raw(raw)
        std = np.exp(log_std)
        a_raw = mu + std * xi
        action = self.action_limit * np.tanh(a_raw)
        log_p = (
            -0.5 * xi**2
            - log_std
            - 0.5 * math.log(2.0 * math.pi)
            - math.log(self.action_limit)
            - (math.log(4.0) - 2.0 * a_raw - 2.0 * _softplus(-2.0 * a_raw))
        )
        return action, log_p

    def act(self, state, rng: np.random.Generator | None = None, deterministic: bool = False):
        s = np.asarray(state, dtype=self.net.dtype).reshape(1, -1)
        if deterministic:
            mu, _, _ = self.heads(s)
            return float(self.action_limit * np.tanh(mu[0]))
        if rng is None:
            raise ValueError("stochastic action sampling needs an RNG")
        xi = rng.standard_normal(1)
        action, _ = self.sample(s, xi.astype(self.net.dtype))
        return float(action[0])


def policy_act(policy: GaussianPolicy, state, rng=None, deterministic: bool = False) -> float:
    return policy.act(state, rng=rng, deterministic=deterministic)


class SacAgent:
    """Policy, twin critics, their target copies, and optimizer state."""

    def __init__(self, config: SacConfig, dtype=np.float32):
        self.config = config
        H = config.history_len
        hw = tuple(config.hidden_widths)
        self.policy = GaussianPolicy(
            H, hw, config.action_limit, substream(config.seed, "init-policy"), dtype
        )
        self.q1 = Mlp((H + 1,) + hw + (1,), substream(config.seed, "init-q1"), dtype)
        self.q2 = Mlp((H + 1,) + hw + (1,), substream(config.seed, "init-q2"), dtype)
        self.q1_targ = self.q1.copy()
        self.q2_targ = self.q2.copy()
        self.opt_policy = _Adam(self.policy.net.parameters(), config.learning_rate)
        self.opt_q1 = _Adam(self.q1.parameters(), config.learning_rate)
        self.opt_q2 = _Adam(self.q2.parameters(), config.learning_rate)

    def act(self, state, rng=None, deterministic=False) -> float:
        return self.policy.act(state, rng=rng, deterministic=deterministic)


def _critic_loss_grads(critic: Mlp, s, a, y):
    """Mean-squared Bellman error and its parameter gradients."""
    x = np.concatenate([s, a[:, None]], axis=1)
    q, cache = critic.forward(x, need_cache=True)
    q = q[:, 0]
    err = q - y
    loss = float(np.mean(err**2))
    dy = (2.0 / len(y)) * err[:, None]
    grads, _ = critic.backward(cache, dy)
    return loss, grads, q


def _policy_loss_grads(policy: GaussianPolicy, q1: Mlp, q2: Mlp, s, xi, alpha):
    """Entropy-regularized policy loss, gradients, and diagnostics.

    Differentiates mean(alpha*log pi - min(Q1, Q2)) with reparameterized
    actions; the critic parameters stay fixed, only their action-input
    gradients flow back into the policy.
    """
    B = len(s)
    c = policy.action_limit
    mu, raw, cache = policy.heads(s, need_cache=True)
    log_std = _log_std_from_raw(raw)
    std = np.exp(log_std)
    a_raw = mu + std * xi
    th = np.tanh(a_raw)
    action = c * th
    log_p = (
        -0.5 * xi**2
        - log_std
        - 0.5 * math.log(2.0 * math.pi)
        - math.log(c)
        - (math.log(4.0) - 2.0 * a_raw - 2.0 * _softplus(-2.0 * a_raw))
    )

    x = np.concatenate([s, action[:, None]], axis=1)
    qv1, cache1 = q1.forward(x, need_cache=True)
    qv2, cache2 = q2.forward(x, need_cache=True)
    qv1 = qv1[:, 0]
    qv2 = qv2[:, 0]
    qmin = np.minimum(qv1, qv2)
    loss = float(np.mean(alpha * log_p - qmin))

    pick1 = (qv1 <= qv2).astype(policy.net.dtype)
    dq = -1.0 / B
    _, dx1 = q1.backward(cache1, (dq * pick1)[:, None], with_param_grads=False)
    _, dx2 = q2.backward(cache2, (dq * (1.0 - pick1))[:, None], with_param_grads=False)
    dl_da = dx1[:, -1] + dx2[:, -1]

    # d log pi / d a_raw = 2 tanh(a_raw); d a / d a_raw = c sech^2
    sech2 = 1.0 - th**2
    dl_daraw = (alpha / B) * (2.0 * th) + dl_da * c * sech2
    d_mu = dl_daraw
    d_logstd = dl_daraw * std * xi - (alpha / B) * np.ones_like(xi)
    d_raw = d_logstd * 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - np.tanh(raw) ** 2)
    d_out = np.stack([d_mu, d_raw], axis=1)
    grads, _ = policy.net.backward(cache, d_out)
    diag = {"entropy": float(-np.mean(log_p)), "q_pi": float(np.mean(qmin))}
    return loss, grads, diag


def _soft_update(target: Mlp, online: Mlp, tau: float):
    for pt, po in zip(target.parameters(), online.parameters()):
        pt *= 1.0 - tau
        pt += tau * po


def sac_update(agent: SacAgent, batch: dict, config: SacConfig, rng: np.random.Generator):
    """One gradient step on both critics and the policy plus target smoothing.

    Rejects the update (raising RuntimeError) if any loss turns non-finite.
    """
    s, a, r, s2, d = batch["s"], batch["a"], batch["r"], batch["s2"], batch["d"]
    dtype = agent.q1.dtype
    B = len(r)

    xi2 = rng.standard_normal(B).astype(dtype)
    a2, log_p2 = agent.policy.sample(s2, xi2)
    x2 = np.concatenate([s2, a2[:, None]], axis=1)
    q1t = agent.q1_targ.forward(x2)[:, 0]
    q2t = agent.q2_targ.forward(x2)[:, 0]
    target_v = np.minimum(q1t, q2t) - config.alpha * log_p2
    y = r + config.gamma_discount * (1.0 - d) * target_v

    loss_q1, grads_q1, _ = _critic_loss_grads(agent.q1, s, a, y)
    loss_q2, grads_q2, _ = _critic_loss_grads(agent.q2, s, a, y)

    xi = rng.standard_normal(B).astype(dtype)
    loss_pi, grads_pi, diag = _policy_loss_grads(
        agent.policy, agent.q1, agent.q2, s, xi, config.alpha
    )
    if not (math.isfinite(loss_q1) and math.isfinite(loss_q2) and math.isfinite(loss_pi)):
        raise RuntimeError(
            f"non-finite SAC losses (q1={loss_q1}, q2={loss_q2}, pi={loss_pi}); update rejected"
        )

    agent.opt_q1.update(agent.q1.parameters(), grads_q1)
    agent.opt_q2.update(agent.q2.parameters(), grads_q2)
    agent.opt_policy.update(agent.policy.net.parameters(), grads_pi)
    _soft_update(agent.q1_targ, agent.q1, config.tau_target)
    _soft_update(agent.q2_targ, agent.q2, config.tau_target)
    return {"loss_q1": loss_q1, "loss_q2": loss_q2, "loss_pi": loss_pi, **diag}


class ReplayBuffer:
    """Uniform replay over transitions, stored as per-episode streams.

    Observations are scalars, so episodes are kept as flat arrays and the
    H-step history windows are rebuilt on sampling; this keeps a million
    transitions in tens of megabytes instead of the gigabytes a materialized
    window-per-transition layout would need.  Whole episodes are evicted
    oldest-first once capacity is exceeded.
    """

    def __init__(self, capacity: int, history_len: int, dtype=np.float32):
        self.capacity = int(capacity)
        self.H = int(history_len)
        self.dtype = dtype
        self._episodes = []
        self._lengths = []
        self.size = 0
        self._flat = None  # rebuilt lazily: concatenated obs + per-transition tables

    def add_episode(self, obs, actions, rewards, terminal: bool):
        obs = np.asarray(obs, dtype=self.dtype)
        actions = np.asarray(actions, dtype=self.dtype)
        rewards = np.asarray(rewards, dtype=self.dtype)
        T = len(actions)
        if T < 1 or len(obs) != T + 1 or len(rewards) != T:
            raise ValueError("episode arrays must satisfy len(obs) == len(actions)+1")
        done = np.zeros(T, dtype=self.dtype)
        if terminal:
            done[-1] = 1.0
        self._episodes.append({"obs": obs, "a": actions, "r": rewards, "d": done})
        self._lengths.append(T)
        self.size += T
        while self.size > self.capacity and len(self._episodes) > 1:
            dropped = self._episodes.pop(0)
            self._lengths.pop(0)
            self.size -= len(dropped["a"])
        self._flat = None

    def _window(self, obs, t):
        idx = np.arange(t - self.H + 1, t + 1)
        return obs[np.maximum(idx, 0)]

    def _rebuild_flat(self):
        # flattened view: transition k maps to an absolute obs index, and the
        # window start is clamped to its episode's first observation, so a
        # whole batch of histories is one fancy-indexing gather
        obs_all = np.concatenate([ep["obs"] for ep in self._episodes])
        offsets = np.cumsum([0] + [len(ep["obs"]) for ep in self._episodes])[:-1]
        obs_pos, ep_start, a_all, r_all, d_all = [], [], [], [], []
        for ep, off in zip(self._episodes, offsets):
            T = len(ep["a"])
            obs_pos.append(off + np.arange(T))
            ep_start.append(np.full(T, off))
            a_all.append(ep["a"])
            r_all.append(ep["r"])
            d_all.append(ep["d"])
        self._flat = {
            "obs": obs_all,
            "pos": np.concatenate(obs_pos),
            "start": np.concatenate(ep_start),
            "a": np.concatenate(a_all),
            "r": np.concatenate(r_all),
            "d": np.concatenate(d_all),
        }

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        if self.size < 1:
            raise ValueError("buffer is empty")
        if self._flat is None:
            self._rebuild_flat()
        f = self._flat
        k = rng.integers(0, self.size, size=batch_size)
        pos = f["pos"][k]
        start = f["start"][k]
        lags = np.arange(-self.H + 1, 1)
        idx_s = np.maximum(pos[:, None] + lags, start[:, None])
        idx_s2 = np.maximum(pos[:, None] + 1 + lags, start[:, None])
        return {
            "s": f["obs"][idx_s],
            "a": f["a"][k],
            "r": f["r"][k],
            "s2": f["obs"][idx_s2],
            "d": f["d"][k],
        }


@dataclass
class TrainResult:
    curve: list  # (episode, running_reward, steps_cumulative)
    agent: SacAgent
    episodes_run: int
    stop_reason: str


def train(
    params: PhysicalParams,
    sensor: SensorSpec,
    config: SacConfig,
    max_episodes: int = 2000,
    env_config: EpisodeConfig | None = None,
    plateau_window: int = 500,
    plateau_min_gain: float = 1.0,
    plateau_floor: int = 1000,
    progress=None,
) -> TrainResult:
    """Episodic SAC training loop with plateau-based early stopping.

    Stops once the 100-episode running mean reaches the per-episode reward
    ceiling, or when it has not improved by more than plateau_min_gain over
    the last plateau_window episodes, or at max_episodes.  The plateau rule
    only arms after plateau_floor episodes, and the best-so-far reference it
    improves against starts at plateau_floor - plateau_window: on this task
    useful reward signal routinely appears later than any 500-episode
    cold-start window, and the random-action warmup phase would otherwise
    plant an unbeatable early reference.
    """
    env_config = env_config or EpisodeConfig()
    agent = SacAgent(config)
    buffer = ReplayBuffer(config.buffer_capacity, config.history_len)
    rng_batch = substream(config.seed, "batch")
    rng_updates = substream(config.seed, "update-noise")
    rng_warmup = substream(config.seed, "warmup-actions")
    rng_act = substream(config.seed, "rollout-actions")

    curve = []
    recent = []
    total_steps = 0
    best_mean = -math.inf
    track_from = max(0, plateau_floor - plateau_window)
    best_mean_episode = track_from
    stop_reason = "max_episodes"
    H = config.history_len

    for episode in range(max_episodes):
        ep_seed = substream_seed(config.seed, "train-episode", episode)
        rng_init = substream(ep_seed, "init")
        rng_sensor = substream(ep_seed, sensor.rng_stream)
        state = sample_initial_state(env_config, rng_init)
        y0 = observe(params, state, sensor, rng_sensor)
        obs_hist = [y0]
        window = np.full(H, y0, dtype=np.float32)
        actions, rewards = [], []
        terminal = False
        for _ in range(env_config.max_steps):
            if total_steps < config.warmup_steps:
                u = float(rng_warmup.uniform(-config.action_limit, config.action_limit))
            else:
                u = agent.act(window, rng=rng_act)
            state = step(params, state, u + env_config.reference)
            violated = (
                abs(state.h) > env_config.h_limit
                or abs(state.theta) > env_config.theta_limit
            )
            y = observe(params, state, sensor, rng_sensor)
            obs_hist.append(y)
            actions.append(u)
            rewards.append(0.0 if violated else 1.0)
            window = np.roll(window, -1)
            window[-1] = y
            total_steps += 1
            if total_steps > config.warmup_steps and buffer.size >= config.batch_size:
                for _ in range(config.updates_per_step):
                    batch = buffer.sample(config.batch_size, rng_batch)
                    sac_update(agent, batch, config, rng_updates)
            if violated:
                terminal = True
                break
        buffer.add_episode(obs_hist, actions, rewards, terminal)
        ep_reward = float(sum(rewards))
        recent.append(ep_reward)
        if len(recent) > 100:
            recent.pop(0)
        running = float(np.mean(recent))
        curve.append((episode, running, total_steps))
        if progress is not None:
            progress(episode, running, total_steps)
        if episode >= track_from and running > best_mean + plateau_min_gain:
            best_mean = running
            best_mean_episode = episode
        if running >= float(env_config.max_steps) - 1e-9:
            stop_reason = "ceiling"
            break
        if episode >= plateau_floor and episode - best_mean_episode >= plateau_window:
            stop_reason = "plateau"
            break
    return TrainResult(
        curve=curve,
        agent=agent,
        episodes_run=len(curve),
        stop_reason=stop_reason,
    )


class PolicyController(Controller):
    """Deterministic evaluation wrapper: history window in, squashed mean out."""

    def __init__(self, agent_or_policy):
        self.policy = (
            agent_or_policy.policy
            if isinstance(agent_or_policy, SacAgent)
            else agent_or_policy
        )
        self.H = self.policy.net.sizes[0]
        self._window = None

    def reset(self) -> None:
        self._window = None

    def act(self, y: float) -> float:
        if self._window is None:
            self._window = np.full(self.H, y, dtype=self.policy.net.dtype)
        else:
            self._window = np.roll(self._window, -1)
            self._window[-1] = y
        return self.policy.act(self._window, deterministic=True)


def save_policy(path, policy: GaussianPolicy, metadata: dict | None = None) -> None:
    """Architecture JSON next to a row-major float32 weight blob."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    params = policy.net.parameters()
    with open(blob_path, "wb") as f:
        for p in params:
            f.write(np.ascontiguousarray(p, dtype=np.float32).tobytes())
    arch = {
        "sizes": list(policy.net.sizes),
        "action_limit": policy.action_limit,
        "log_std_range": [LOG_STD_MIN, LOG_STD_MAX],
        "blob": blob_path.name,
        "shapes": [list(p.shape) for p in params],
        "metadata": metadata or {},
    }
    with open(path, "w") as f:
        json.dump(arch, f, indent=2, sort_keys=True)
        f.write("\n")


def load_policy(path) -> GaussianPolicy:
    path = Path(path)
    with open(path) as f:
        arch = json.load(f)
    sizes = arch["sizes"]
    policy = GaussianPolicy(
        sizes[0], tuple(sizes[1:-1]), arch["action_limit"], substream(0, "load"), np.float32
    )
    raw = (path.parent / arch["blob"]).read_bytes()
    flat = np.frombuffer(raw, dtype=np.float32)
    offset = 0
    params = policy.net.parameters()
    for p, shape in zip(params, arch["shapes"]):
        count = int(np.prod(shape))
        p[...] = flat[offset : offset + count].reshape(shape)
        offset += count
    if offset != len(flat):
        raise ValueError("weight blob size does not match the architecture")
    return policy
