"""Hierarchical TD3 agent on numpy MLPs, with goal relabeling for the high-level controller."""
from collections import deque
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, fields
from pathlib import Path
import logging
import math
import sys

SRC_PATH = Path(__file__).resolve().parents[1]
if str(SRC_PATH) not in sys.path:
    sys.path.append(str(SRC_PATH))

import numpy as np

from utils.errors import ConfigError
from utils.model import QBN_MAX, STATE_DIM, STATE_FIELDS

logger = logging.getLogger(__name__)

OUTPUT_ACTIVATIONS: tuple[str, ...] = ("sigmoid", "identity")
FINAL_INIT_SCALE = 3e-3


# numpy MLP

@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output: str = "identity"

    def __post_init__(self) -> None:
        if self.output not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"output activation must be one of {OUTPUT_ACTIVATIONS}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("need one bias vector per weight matrix")
        for position, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {position}: bias does not match weight matrix")
            if position and self.weights[position - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {position}: width mismatch")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        depth = len(self.weights)
        return MlpParams(weights=list(arrays[:depth]), biases=list(arrays[depth:]), output=self.output)

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])


@dataclass
class MlpGradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]


def init_mlp(widths: Sequence[int], output: str, rng: np.random.Generator) -> MlpParams:
    """Fan-in uniform init; the last layer starts near zero."""
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ValueError(f"invalid widths {widths}")
    weights, biases = [], []
    for position, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = FINAL_INIT_SCALE if position == len(widths) - 2 else 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(weights=weights, biases=biases, output=output)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(params: MlpParams, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    if x.shape[-1] != params.widths[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match network width {params.widths[0]}")
    activations = [x]
    pre = []
    last = len(params.weights) - 1
    for position, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = activations[-1] @ w + b
        pre.append(z)
        if position < last:
            activations.append(np.maximum(z, 0.0))
        elif params.output == "sigmoid":
            activations.append(_sigmoid(z))
        else:
            activations.append(z)
    return activations, pre


def mlp_forward(params: MlpParams, inputs: np.ndarray | Sequence[float]) -> np.ndarray:
    x = np.asarray(inputs, dtype=float)
    squeeze = x.ndim == 1
    activations, _ = _forward(params, np.atleast_2d(x))
    out = activations[-1]
    return out[0] if squeeze else out


def mlp_gradients(
    params: MlpParams,
    inputs: np.ndarray | Sequence[float],
    upstream: np.ndarray | Sequence[float],
) -> MlpGradients:
    """Gradients of sum(upstream * forward(inputs)) w.r.t. parameters and inputs."""
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    grad = np.atleast_2d(np.asarray(upstream, dtype=float))
    activations, pre = _forward(params, x)
    if grad.shape != activations[-1].shape:
        raise ValueError(f"upstream shape {grad.shape} does not match output {activations[-1].shape}")

    if params.output == "sigmoid":
        out = activations[-1]
        delta = grad * out * (1.0 - out)
    else:
        delta = grad
    weight_grads: list[np.ndarray] = [None] * len(params.weights)
    bias_grads: list[np.ndarray] = [None] * len(params.weights)
    for position in range(len(params.weights) - 1, -1, -1):
        weight_grads[position] = activations[position].T @ delta
        bias_grads[position] = delta.sum(axis=0)
        delta = delta @ params.weights[position].T
        if position > 0:
            delta = delta * (pre[position - 1] > 0.0)
    return MlpGradients(weights=weight_grads, biases=bias_grads, inputs=delta)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays])


def adam_step(
    arrays: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    lr: float,
    state: AdamState,
) -> list[np.ndarray]:
    """One descent step; advances ``state`` in place and returns new arrays."""
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ValueError("parameter, gradient and optimizer state counts differ")
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    updated = []
    for index, (value, grad) in enumerate(zip(arrays, grads)):
        state.m[index] = state.beta1 * state.m[index] + (1.0 - state.beta1) * grad
        state.v[index] = state.beta2 * state.v[index] + (1.0 - state.beta2) * grad * grad
        m_hat = state.m[index] / correction1
        v_hat = state.v[index] / correction2
        updated.append(value - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return updated


def polyak_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    return target.with_arrays([(1.0 - tau) * t + tau * o for t, o in zip(target.arrays(), online.arrays())])


# transitions and replay

@dataclass(frozen=True)
class LowTransition:
    state: np.ndarray
    goal: float
    action: float
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass(frozen=True)
class HighTransition:
    state: np.ndarray
    goal: float
    reward: float
    next_state: np.ndarray
    done: bool
    states: tuple[np.ndarray, ...] = ()
    actions: tuple[float, ...] = ()

    @property
    def relabelable(self) -> bool:
        return bool(self.actions)


@dataclass
class LayerRollout:
    """One layer's weight phase as collected from the env."""

    start_state: np.ndarray
    goal: float
    states: list[np.ndarray] = field(default_factory=list)
    actions: list[float] = field(default_factory=list)
    erds: list[float] = field(default_factory=list)
    next_state: np.ndarray | None = None
    done: bool = False


def make_high_transition(rollout: LayerRollout) -> HighTransition:
    if not rollout.actions or len(rollout.states) != len(rollout.actions) or len(rollout.erds) != len(rollout.actions):
        raise ValueError("a layer rollout needs one state, action and reward per kernel")
    next_state = rollout.next_state if rollout.next_state is not None else np.zeros_like(rollout.start_state)
    return HighTransition(
        state=rollout.start_state,
        goal=rollout.goal,
        reward=float(sum(rollout.erds)),
        next_state=next_state,
        done=rollout.done,
        states=tuple(rollout.states),
        actions=tuple(rollout.actions),
    )


class ReplayBuffer:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, index: int):
        return self._items[index]

    def push(self, item) -> None:
        self._items.append(item)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if not self._items:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(0, len(self._items), size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list:
        return [self._items[i] for i in self.sample_indices(batch_size, rng)]


# hyperparameters and schedules

@dataclass(frozen=True)
class AgentHyper:
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    batch_size: int = 64
    buffer_capacity: int = 2000
    explore_episodes: int = 100
    exploit_episodes: int = 300
    sigma0: float = 0.5
    noise_decay: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    target_noise: float = 0.1
    target_noise_clip: float = 0.25
    gamma_irw: float = 0.99
    gamma_erd: float = 0.99
    zeta_start: float = 0.1
    zeta_end: float = 0.8
    fixed_zeta: float | None = None
    hidden: tuple[int, ...] = (300, 300)
    relabel_candidates: int = 10
    relabel_std: float = 0.1
    updates_per_step: int = 2

    def __post_init__(self) -> None:
        for name in ("actor_lr", "critic_lr", "sigma0", "noise_decay"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("batch_size", "buffer_capacity", "policy_delay", "updates_per_step"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.explore_episodes < 0 or self.exploit_episodes < 0:
            raise ConfigError("episode counts must be non-negative")
        for name in ("gamma_irw", "gamma_erd"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        zetas = [self.zeta_start, self.zeta_end] + ([] if self.fixed_zeta is None else [self.fixed_zeta])
        if any(not 0.0 <= z <= 1.0 for z in zetas):
            raise ConfigError("zeta values must lie in [0, 1]")
        if not self.hidden or any(width < 1 for width in self.hidden):
            raise ConfigError("hidden widths must be positive")
        if self.relabel_candidates < 2:
            raise ConfigError("relabeling needs at least the original and the induced goal")

    @property
    def episodes(self) -> int:
        return self.explore_episodes + self.exploit_episodes

    @classmethod
    def from_mapping(cls, document: Mapping[str, object]) -> "AgentHyper":
        known = {item.name for item in fields(cls)}
        unknown = set(document) - known
        if unknown:
            raise ConfigError(f"unknown agent keys: {', '.join(sorted(unknown))}")
        values = dict(document)
        if "hidden" in values:
            values["hidden"] = tuple(int(width) for width in values["hidden"])
        return cls(**values)


def zeta_schedule(episode: int, episodes: int, start: float = 0.1, end: float = 0.8) -> float:
    if episodes <= 1:
        return end
    progress = min(max(episode / (episodes - 1), 0.0), 1.0)
    return start + (end - start) * progress


def noise_schedule(episode: int, explore_episodes: int = 100, sigma0: float = 0.5, decay: float = 0.99) -> float:
    if episode < explore_episodes:
        return sigma0
    return sigma0 * decay ** (episode - explore_episodes)


def _perturb(mean: float, sigma: float, rng: np.random.Generator) -> float:
    if sigma > 0:
        mean += rng.normal(0.0, sigma)
    return float(min(max(mean, 0.0), 1.0))


def select_goal(hlc_actor: MlpParams, state: np.ndarray, sigma: float, rng: np.random.Generator) -> float:
    return _perturb(float(mlp_forward(hlc_actor, state)[0]), sigma, rng)


def select_action(
    llc_actor: MlpParams,
    state: np.ndarray,
    goal: float,
    sigma: float,
    rng: np.random.Generator,
) -> float:
    return _perturb(float(mlp_forward(llc_actor, np.append(state, goal))[0]), sigma, rng)


# TD3

class Td3Learner:
    def __init__(self, obs_dim: int, hyper: AgentHyper, rng: np.random.Generator):
        self.hyper = hyper
        self.obs_dim = obs_dim
        self.actor = init_mlp((obs_dim, *hyper.hidden, 1), "sigmoid", rng)
        self.critics = [init_mlp((obs_dim + 1, *hyper.hidden, 1), "identity", rng) for _ in range(2)]
        self.actor_target = self.actor.copy()
        self.critic_targets = [critic.copy() for critic in self.critics]
        self.actor_opt = AdamState.zeros_like(self.actor.arrays())
        self.critic_opts = [AdamState.zeros_like(critic.arrays()) for critic in self.critics]
        self.updates = 0

    def act(self, obs: np.ndarray) -> np.ndarray:
        return mlp_forward(self.actor, obs)

    def q_value(self, obs: np.ndarray, actions: np.ndarray, which: int = 0) -> np.ndarray:
        return mlp_forward(self.critics[which], np.column_stack([obs, actions]))[:, 0]

    def update(
        self,
        obs: np.ndarray,
        actions: np.ndarray,
        rewards: np.ndarray,
        next_obs: np.ndarray,
        dones: np.ndarray,
        gamma: float,
        rng: np.random.Generator,
    ) -> float:
        """One TD3 step on a batch; returns the mean critic loss."""
        if len(obs) == 0:
            raise ValueError("cannot update on an empty batch")
        hyper = self.hyper
        batch = len(obs)

        noise = np.clip(rng.normal(0.0, hyper.target_noise, size=batch), -hyper.target_noise_clip, hyper.target_noise_clip)
        next_actions = np.clip(mlp_forward(self.actor_target, next_obs)[:, 0] + noise, 0.0, 1.0)
        next_input = np.column_stack([next_obs, next_actions])
        next_q = np.minimum(
            mlp_forward(self.critic_targets[0], next_input)[:, 0],
            mlp_forward(self.critic_targets[1], next_input)[:, 0],
        )
        targets = rewards + gamma * (1.0 - dones) * next_q

        critic_input = np.column_stack([obs, actions])
        loss = 0.0
        for index, critic in enumerate(self.critics):
            error = mlp_forward(critic, critic_input)[:, 0] - targets
            loss += float(np.mean(error * error))
            grads = mlp_gradients(critic, critic_input, (2.0 * error / batch)[:, None])
            arrays = adam_step(critic.arrays(), grads.arrays(), hyper.critic_lr, self.critic_opts[index])
            self.critics[index] = critic.with_arrays(arrays)

        self.updates += 1
        if self.updates % hyper.policy_delay == 0:
            policy_actions = mlp_forward(self.actor, obs)[:, 0]
            q_grads = mlp_gradients(
                self.critics[0], np.column_stack([obs, policy_actions]), np.full((batch, 1), -1.0 / batch)
            )
            # ascend Q: chain dQ/da through the actor
            actor_grads = mlp_gradients(self.actor, obs, q_grads.inputs[:, -1:])
            arrays = adam_step(self.actor.arrays(), actor_grads.arrays(), hyper.actor_lr, self.actor_opt)
            self.actor = self.actor.with_arrays(arrays)
            self.actor_target = polyak_update(self.actor_target, self.actor, hyper.tau)
            self.critic_targets = [
                polyak_update(target, critic, hyper.tau) for target, critic in zip(self.critic_targets, self.critics)
            ]
        return loss / 2.0


def llc_td3_update(llc: Td3Learner, batch: Sequence[LowTransition], gamma: float, rng: np.random.Generator) -> float:
    if not batch:
        raise ValueError("cannot update on an empty batch")
    obs = np.array([np.append(t.state, t.goal) for t in batch])
    next_obs = np.array([np.append(t.next_state, t.goal) for t in batch])
    return llc.update(
        obs,
        np.array([t.action for t in batch]),
        np.array([t.reward for t in batch]),
        next_obs,
        np.array([float(t.done) for t in batch]),
        gamma,
        rng,
    )


def hlc_td3_update(hlc: Td3Learner, batch: Sequence[HighTransition], gamma: float, rng: np.random.Generator) -> float:
    if not batch:
        raise ValueError("cannot update on an empty batch")
    return hlc.update(
        np.array([t.state for t in batch]),
        np.array([t.goal for t in batch]),
        np.array([t.reward for t in batch]),
        np.array([t.next_state for t in batch]),
        np.array([float(t.done) for t in batch]),
        gamma,
        rng,
    )


def induced_goal(actions: Sequence[float]) -> float:
    """Raw weight goal whose target average equals the mean QBN of the stored actions."""
    average = QBN_MAX * float(np.mean(actions))
    return min(max((average - 1.0) / (QBN_MAX - 1), 0.0), 1.0)


def relabel_candidates(high: HighTransition, rng: np.random.Generator, count: int = 10, std: float = 0.1) -> list[float]:
    samples = np.clip(rng.normal(high.goal, std, size=count - 2), 0.0, 1.0)
    return [high.goal, induced_goal(high.actions), *(float(s) for s in samples)]


GOAL_FIELD = STATE_FIELDS.index("prev_goal")


def with_goal(state: np.ndarray, goal: float) -> np.ndarray:
    """Copy of an observation whose goal slot holds ``goal``."""
    relabeled = np.array(state, dtype=float)
    relabeled[GOAL_FIELD] = goal
    return relabeled


def goal_log_likelihood(llc_actor: MlpParams, high: HighTransition, goal: float) -> float:
    obs = np.array([np.append(with_goal(state, goal), goal) for state in high.states])
    predicted = mlp_forward(llc_actor, obs)[:, 0]
    residual = np.asarray(high.actions, dtype=float) - predicted
    return -float(np.sum(residual * residual))


def relabel_goal(
    high: HighTransition,
    llc_actor: MlpParams,
    rng: np.random.Generator,
    count: int = 10,
    std: float = 0.1,
) -> float:
    """Candidate goal that best explains the stored actions under the current LLC; ties go to the smaller goal."""
    if not high.relabelable:
        return high.goal
    candidates = relabel_candidates(high, rng, count, std)
    scores = [goal_log_likelihood(llc_actor, high, goal) for goal in candidates]
    best = max(scores)
    return min(goal for goal, score in zip(candidates, scores) if score == best)


class HierarchicalAgent:
    def __init__(self, hyper: AgentHyper, rng: np.random.Generator):
        self.hyper = hyper
        self.rng = rng
        self.hlc = Td3Learner(STATE_DIM, hyper, rng)
        self.llc = Td3Learner(STATE_DIM + 1, hyper, rng)
        self.low_buffer = ReplayBuffer(hyper.buffer_capacity)
        self.high_buffer = ReplayBuffer(hyper.buffer_capacity)
        self.relabel_changes = 0

    def sigma(self, episode: int) -> float:
        return noise_schedule(episode, self.hyper.explore_episodes, self.hyper.sigma0, self.hyper.noise_decay)

    def zeta(self, episode: int, episodes: int) -> float:
        if self.hyper.fixed_zeta is not None:
            return self.hyper.fixed_zeta
        return zeta_schedule(episode, episodes, self.hyper.zeta_start, self.hyper.zeta_end)

    def goal(self, state: np.ndarray, sigma: float) -> float:
        return select_goal(self.hlc.actor, state, sigma, self.rng)

    def action(self, state: np.ndarray, goal: float, sigma: float) -> float:
        return select_action(self.llc.actor, state, goal, sigma, self.rng)

    def remember_low(self, transition: LowTransition) -> None:
        self.low_buffer.push(transition)

    def remember_high(self, transition: HighTransition) -> None:
        self.high_buffer.push(transition)

    def train_llc(self) -> float | None:
        if len(self.low_buffer) < self.hyper.batch_size:
            return None
        batch = self.low_buffer.sample(self.hyper.batch_size, self.rng)
        return llc_td3_update(self.llc, batch, self.hyper.gamma_irw, self.rng)

    def relabel(self, batch: Sequence[HighTransition]) -> list[HighTransition]:
        relabeled = []
        for transition in batch:
            goal = relabel_goal(
                transition, self.llc.actor, self.rng, self.hyper.relabel_candidates, self.hyper.relabel_std
            )
            if goal != transition.goal:
                self.relabel_changes += 1
                transition = HighTransition(
                    state=transition.state,
                    goal=goal,
                    reward=transition.reward,
                    next_state=transition.next_state if transition.done else with_goal(transition.next_state, goal),
                    done=transition.done,
                    states=tuple(with_goal(state, goal) for state in transition.states),
                    actions=transition.actions,
                )
            relabeled.append(transition)
        return relabeled

    def train_hlc(self) -> float | None:
        if len(self.high_buffer) < self.hyper.batch_size:
            return None
        batch = self.relabel(self.high_buffer.sample(self.hyper.batch_size, self.rng))
        return hlc_td3_update(self.hlc, batch, self.hyper.gamma_erd, self.rng)
