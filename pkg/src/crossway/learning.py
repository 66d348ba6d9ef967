"""Joint-action actor-critic training for the crossing-order policy.

The coordination tick defines an MDP: the state is the padded matrix of
per-robot features, the action is the padded vector of precedence indices
(softmaxed during training so distinct actions map to distinct orders), and
the reward scores progress of robots granted a crossing against a quadratic
penalty for sending robots back to the provisional phase.  The actor is
shared across robots; its update flows the critic's action gradient through
the whole joint action, not a single agent's component.
"""

from __future__ import annotations

import math
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .coordination import CoordinationInstance, SequentialOutcome
from .errors import InputError
from .nets import MLP, N_FEATURES, make_critic_net, make_policy_net
from .policies import FeatureBounds, Policy, padded_state

_BUFFER_TAG = "crossway-buffer-v1"


def reward(
    inst: CoordinationInstance,
    outcome: SequentialOutcome,
    T_r: float,
    printed_penalty_form: bool = False,
) -> float:
    """Per-tick reward: granted progress minus squared-progress deferral penalty.

    Granted robots contribute their priority-weighted distance covered during
    the first ``T_r`` seconds after arrival (provisional history plus the
    fresh plan).  Deferred robots are penalized by the squared distance they
    have already covered, scaled by the maximum priority in play; a robot
    deferred straight after arriving costs nothing.  ``printed_penalty_form``
    switches the penalty distance to (approach - x), for sensitivity studies.
    """
    if not inst.pending:
        return 0.0
    n = len(inst.pending)
    priorities = [p.robot.priority for p in inst.pending]
    priorities += [c.robot.priority for c in inst.committed]
    r_bar = max(priorities) if priorities else 1.0
    by_id = {p.robot.id: p for p in inst.pending}
    total = 0.0
    for rid in outcome.entered:
        p = by_id[rid]
        d = inst.geom.approach_length[p.robot.lane]
        t_target = p.robot.arrival_time + T_r
        if t_target >= inst.t or p.history is None:
            x_t, _ = outcome.trajectories[rid].trajectory.state_at(t_target)
        else:
            x_t, _ = p.history.state_at(t_target)
        total += p.robot.priority * (x_t + d) / n
    for rid in outcome.deferred:
        p = by_id[rid]
        d = inst.geom.approach_length[p.robot.lane]
        dist = (d - p.x) if printed_penalty_form else (d + p.x)
        total -= r_bar * dist * dist / n
    return total


def softmax_action(indices: np.ndarray) -> np.ndarray:
    """Numerically stabilized softmax over raw precedence indices."""
    z = np.asarray(indices, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ou_noise_step(
    state: np.ndarray, theta: float, sigma: float, dt: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One Ornstein-Uhlenbeck step toward 0; returns (new state, sample)."""
    state = state + theta * (0.0 - state) * dt + sigma * math.sqrt(dt) * rng.standard_normal(
        state.shape
    )
    return state, state


class OUNoise:
    """OU exploration noise with linearly decaying Gaussian variance."""

    def __init__(
        self,
        dim: int,
        theta: float = 0.15,
        sigma_start: float = 0.2,
        sigma_end: float = 0.01,
        decay_steps: int = 5000,
        dt: float = 1.0,
        seed: int = 0,
    ):
        self.theta = theta
        self.sigma_start = sigma_start
        self.sigma_end = sigma_end
        self.decay_steps = max(decay_steps, 1)
        self.dt = dt
        self.rng = np.random.default_rng([seed, 11])
        self.state = np.zeros(dim)
        self.calls = 0

    def sigma(self) -> float:
        frac = min(self.calls / self.decay_steps, 1.0)
        return self.sigma_start + frac * (self.sigma_end - self.sigma_start)

    def sample(self) -> np.ndarray:
        self.state, out = ou_noise_step(self.state, self.theta, self.sigma(), self.dt, self.rng)
        self.calls += 1
        return out


@dataclass
class Transition:
    state: np.ndarray  # (n_robots, 10)
    action: np.ndarray  # (n_robots,)
    reward: float
    next_state: np.ndarray


class ReplayBuffer:
    """Bounded FIFO transition store with uniform without-replacement sampling."""

    def __init__(self, n_robots: int, capacity: int = 1_000_000):
        self.n_robots = n_robots
        self.capacity = capacity
        self.states: list[np.ndarray] = []
        self.actions: list[np.ndarray] = []
        self.rewards: list[float] = []
        self.next_states: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.rewards)

    def add(self, tr: Transition):
        if tr.state.shape != (self.n_robots, N_FEATURES) or tr.action.shape != (self.n_robots,):
            raise InputError("transition dimensions do not match buffer pad size")
        if len(self) >= self.capacity:
            self.states.pop(0)
            self.actions.pop(0)
            self.rewards.pop(0)
            self.next_states.pop(0)
        self.states.append(np.asarray(tr.state, dtype=float))
        self.actions.append(np.asarray(tr.action, dtype=float))
        self.rewards.append(float(tr.reward))
        self.next_states.append(np.asarray(tr.next_state, dtype=float))

    def sample(self, rng: np.random.Generator, n: int):
        idx = rng.choice(len(self), size=min(n, len(self)), replace=False)
        S = np.stack([self.states[i] for i in idx])
        A = np.stack([self.actions[i] for i in idx])
        R = np.array([self.rewards[i] for i in idx])
        S2 = np.stack([self.next_states[i] for i in idx])
        return S, A, R, S2

    @classmethod
    def merge(cls, buffers: list["ReplayBuffer"], capacity: int = 1_000_000) -> "ReplayBuffer":
        if not buffers:
            raise InputError("nothing to merge")
        out = cls(buffers[0].n_robots, capacity)
        for b in buffers:
            if b.n_robots != out.n_robots:
                raise InputError("buffers have mismatched pad sizes")
            for i in range(len(b)):
                out.add(Transition(b.states[i], b.actions[i], b.rewards[i], b.next_states[i]))
        return out

    def save(self, path: str):
        with open(path, "w") as fh:
            fh.write(f"{_BUFFER_TAG}\n")
            fh.write(f"n_robots {self.n_robots} features {N_FEATURES} size {len(self)}\n")
            for i in range(len(self)):
                row = np.concatenate(
                    [
                        self.states[i].ravel(),
                        self.actions[i],
                        [self.rewards[i]],
                        self.next_states[i].ravel(),
                    ]
                )
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path: str) -> "ReplayBuffer":
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        if not lines or lines[0] != _BUFFER_TAG:
            raise InputError(f"{path}: not a {_BUFFER_TAG} file")
        head = lines[1].split()
        n_robots = int(head[1])
        buf = cls(n_robots)
        sdim = n_robots * N_FEATURES
        for ln in lines[2:]:
            vals = np.array([float(v) for v in ln.split()])
            s = vals[:sdim].reshape(n_robots, N_FEATURES)
            a = vals[sdim : sdim + n_robots]
            r = float(vals[sdim + n_robots])
            s2 = vals[sdim + n_robots + 1 :].reshape(n_robots, N_FEATURES)
            buf.add(Transition(s, a, r, s2))
        return buf


@dataclass
class TrainerConfig:
    n_robots: int
    gamma: float = 0.99
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    polyak: float = 0.005
    batch_size: int = 64
    critic_hidden: int = 64
    # Rewards are multiplied by this inside the TD target.  Raw rewards are
    # O(1e3); regressing a freshly initialized net onto targets that large
    # produces early gradients that drive every hidden ReLU negative and the
    # critic collapses to a constant.  Scaling Q is monotone, so the actor's
    # ascent direction is unchanged.  `cml_train` sets it from buffer
    # statistics when left at None.
    reward_scale: float | None = None


class Trainer:
    """Actor/critic pair with target networks and polyak tracking."""

    def __init__(self, cfg: TrainerConfig, seed: int = 0):
        self.cfg = cfg
        self.actor = make_policy_net(seed=seed)
        self.critic = make_critic_net(cfg.n_robots, cfg.critic_hidden, seed=seed + 1)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.iteration = 0

    def _scale(self) -> float:
        return 1.0 if self.cfg.reward_scale is None else self.cfg.reward_scale

    def _joint_action(self, actor: MLP, S: np.ndarray) -> np.ndarray:
        """(B, n) softmaxed precedence vector from per-robot actor outputs."""
        B, n, f = S.shape
        raw = actor(S.reshape(B * n, f)).reshape(B, n)
        return softmax_action(raw)

    def critic_update(self, batch) -> float:
        S, A, R, S2 = batch
        B, n, f = S.shape
        A2 = self._joint_action(self.target_actor, S2)
        X2 = np.concatenate([S2.reshape(B, n * f), A2], axis=1)
        Q2 = self.target_critic(X2)[:, 0]
        y = R * self._scale() + self.cfg.gamma * Q2
        X = np.concatenate([S.reshape(B, n * f), A], axis=1)
        Q, cache = self.critic.forward(X)
        err = Q[:, 0] - y
        loss = float(np.mean(err * err))
        dQ = (2.0 * err / B).reshape(-1, 1)
        dws, dbs, _ = self.critic.backward(cache, dQ)
        self.critic.step(dws, dbs, self.cfg.critic_lr)
        return loss

    def critic_loss(self, batch) -> float:
        """Loss evaluation without a parameter step (finite-difference checks)."""
        S, A, R, S2 = batch
        B, n, f = S.shape
        A2 = self._joint_action(self.target_actor, S2)
        X2 = np.concatenate([S2.reshape(B, n * f), A2], axis=1)
        Q2 = self.target_critic(X2)[:, 0]
        y = R * self._scale() + self.cfg.gamma * Q2
        X = np.concatenate([S.reshape(B, n * f), A], axis=1)
        Q = self.critic(X)[:, 0]
        return float(np.mean((Q - y) ** 2))

    def actor_objective(self, batch) -> float:
        S = batch[0]
        B, n, f = S.shape
        A = self._joint_action(self.actor, S)
        X = np.concatenate([S.reshape(B, n * f), A], axis=1)
        return float(np.mean(self.critic(X)[:, 0]))

    def actor_gradient(self, batch):
        """Sampled ascent gradient of mean Q through the whole joint action."""
        S = batch[0]
        B, n, f = S.shape
        raw, a_cache = self.actor.forward(S.reshape(B * n, f))
        P = raw.reshape(B, n)
        A = softmax_action(P)
        X = np.concatenate([S.reshape(B, n * f), A], axis=1)
        _, q_cache = self.critic.forward(X)
        dQ = np.full((B, 1), 1.0 / B)
        _, _, dX = self.critic.backward(q_cache, dQ)
        dA = dX[:, n * f :]
        # Softmax Jacobian, row-wise: dP = A * (dA - sum(dA * A)).
        dP = A * (dA - np.sum(dA * A, axis=1, keepdims=True))
        dws, dbs, _ = self.actor.backward(a_cache, dP.reshape(B * n, 1))
        return dws, dbs

    def actor_update(self, batch) -> float:
        dws, dbs = self.actor_gradient(batch)
        # Ascent on the estimated return.
        self.actor.step(dws, dbs, -self.cfg.actor_lr)
        return float(np.linalg.norm(self.actor.flat_grads(dws, dbs)))

    def polyak_update(self, rho: float | None = None):
        rho = self.cfg.polyak if rho is None else rho
        if not 0.0 < rho <= 1.0:
            raise InputError("polyak factor must be in (0, 1]")
        for tgt, src in ((self.target_actor, self.actor), (self.target_critic, self.critic)):
            for tw, sw in zip(tgt.weights, src.weights):
                tw *= 1.0 - rho
                tw += rho * sw
            for tb, sb in zip(tgt.biases, src.biases):
                tb *= 1.0 - rho
                tb += rho * sb

    def train_step(self, buffer: ReplayBuffer, rng: np.random.Generator):
        batch = buffer.sample(rng, self.cfg.batch_size)
        loss = self.critic_update(batch)
        self.actor_update(batch)
        self.polyak_update()
        self.iteration += 1
        return loss, float(np.mean(batch[2]))


class OnlineLearner(Policy):
    """Exploring policy that records transitions (and optionally trains online).

    Acts with softmax(actor outputs) + OU noise; the action entries of real
    robots are used directly as precedence indices.  A transition is closed
    at the next coordination tick, when the successor state is observed.
    """

    name = "online-learner"

    def __init__(
        self,
        trainer: Trainer,
        bounds: FeatureBounds,
        buffer: ReplayBuffer,
        noise: OUNoise | None,
        T_r: float,
        train_online: bool = False,
        train_rng: np.random.Generator | None = None,
    ):
        self.trainer = trainer
        self.bounds = bounds
        self.buffer = buffer
        self.noise = noise
        self.T_r = T_r
        self.train_online = train_online
        self.train_rng = train_rng or np.random.default_rng(0)
        self._open: tuple[np.ndarray, np.ndarray, float] | None = None
        self._current: tuple[np.ndarray, np.ndarray] | None = None

    def precedence(self, inst, rng):
        n = self.trainer.cfg.n_robots
        ids, S = padded_state(inst, self.bounds, n)
        raw = self.trainer.actor(S)[:, 0]
        action = softmax_action(raw)
        if self.noise is not None:
            action = action + self.noise.sample()
        if self._open is not None:
            s_prev, a_prev, r_prev = self._open
            self.buffer.add(Transition(s_prev, a_prev, r_prev, S))
            self._open = None
            if self.train_online and len(self.buffer) >= self.trainer.cfg.batch_size:
                self.trainer.train_step(self.buffer, self.train_rng)
        self._current = (S, action)
        return {rid: float(action[i]) for i, rid in enumerate(ids)}

    def observe(self, inst, outcome):
        """Tick callback: score the decision and hold the transition open."""
        if self._current is None:
            return
        S, action = self._current
        r = reward(inst, outcome, self.T_r)
        self._open = (S, action, r)
        self._current = None


def collect_buffer(
    scenario,
    trainer: Trainer,
    bounds: FeatureBounds,
    n_phases: int,
    seed: int = 0,
    noise: OUNoise | None = None,
    train_online: bool = False,
) -> ReplayBuffer:
    """Run streams under the exploring policy until ``n_phases`` ticks are stored."""
    from .coordination import run_stream

    buffer = ReplayBuffer(trainer.cfg.n_robots)
    learner = OnlineLearner(
        trainer,
        bounds,
        buffer,
        noise,
        scenario.T_r,
        train_online=train_online,
        train_rng=np.random.default_rng([seed, 13]),
    )
    stream = 0
    while len(buffer) < n_phases:
        run_stream(
            scenario,
            learner,
            seed=seed * 10_000 + stream,
            tick_callback=learner.observe,
        )
        stream += 1
    return buffer


def cml_train(
    buffers: list[ReplayBuffer],
    iterations: int,
    seed: int = 0,
    cfg: TrainerConfig | None = None,
) -> tuple[Trainer, list[tuple[int, float, float]]]:
    """Collect-merge-learn: offline updates over the concatenated buffers.

    Returns the trained trainer and a curve of (iteration, critic loss, mean
    sampled batch reward) every 100 iterations.
    """
    merged = ReplayBuffer.merge(buffers)
    if cfg is None:
        cfg = TrainerConfig(n_robots=merged.n_robots)
    if cfg.n_robots != merged.n_robots:
        raise InputError("trainer pad size must match buffer pad size")
    if cfg.reward_scale is None:
        mean_abs = float(np.mean(np.abs(merged.rewards)))
        cfg = dataclasses.replace(cfg, reward_scale=1.0 / max(mean_abs, 1e-12))
    trainer = Trainer(cfg, seed=seed)
    rng = np.random.default_rng([seed, 17])
    curve: list[tuple[int, float, float]] = []
    for i in range(iterations):
        loss, mean_r = trainer.train_step(merged, rng)
        if i % 100 == 0 or i == iterations - 1:
            curve.append((i, loss, mean_r))
    return trainer, curve
