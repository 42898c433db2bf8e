"""Dueling double DQN with prioritized replay, in plain numpy.

The network is a ReLU trunk with separate value and advantage heads,
combined as Q = V + A - mean(A).  Training follows the double-DQN rule: the
online network picks the argmax over the next state's allowed actions, the
target network scores it.  Replay is prioritized by absolute TD error with
importance-sampling correction.  Everything runs in double precision with
explicit analytic gradients so the backward pass can be checked against
finite differences.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


class CheckpointError(Exception):
    """A checkpoint file does not match the expected layout."""


class DivergenceError(Exception):
    """Training produced a non-finite loss or parameter."""


@dataclass(frozen=True)
class AgentConfig:
    """Hyper-parameters of the DQN agent."""

    gamma: float = 0.6
    lr: float = 0.001
    batch_size: int = 64
    buffer_capacity: int = 2000
    per_alpha: float = 0.2
    per_beta: float = 0.6
    target_sync_every: int = 100
    epsilon_start: float = 1.0
    epsilon_final: float = 0.1
    epsilon_decay_iters: int = 2000
    hidden: tuple[int, ...] = (256, 256)
    huber_delta: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


def epsilon_at(iteration: int, config: AgentConfig) -> float:
    """Linearly decayed exploration rate at a training iteration."""
    if config.epsilon_decay_iters <= 0:
        return config.epsilon_final
    frac = min(1.0, max(0.0, iteration / config.epsilon_decay_iters))
    return config.epsilon_start + (config.epsilon_final - config.epsilon_start) * frac


class QNetwork:
    """Dueling MLP: shared ReLU trunk, value head and advantage head."""

    def __init__(
        self,
        state_dim: int,
        num_actions: int,
        hidden: Sequence[int] = (256, 256),
        rng: np.random.Generator | None = None,
    ):
        if state_dim < 1 or num_actions < 1:
            raise ValueError("state_dim and num_actions must be positive")
        if not hidden:
            raise ValueError("the trunk needs at least one hidden layer")
        rng = rng or np.random.default_rng(0)
        self.state_dim = state_dim
        self.num_actions = num_actions
        self.hidden = tuple(hidden)
        self.params: dict[str, np.ndarray] = {}
        fan_in = state_dim
        for i, width in enumerate(self.hidden):
            self.params[f"w{i}"] = self._init(rng, fan_in, width)
            self.params[f"b{i}"] = self._init(rng, fan_in, width, bias=True)
            fan_in = width
        self.params["wv"] = self._init(rng, fan_in, 1)
        self.params["bv"] = self._init(rng, fan_in, 1, bias=True)
        self.params["wa"] = self._init(rng, fan_in, num_actions)
        self.params["ba"] = self._init(rng, fan_in, num_actions, bias=True)

    @staticmethod
    def _init(rng: np.random.Generator, fan_in: int, width: int, bias: bool = False) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        shape = (width,) if bias else (fan_in, width)
        return rng.uniform(-bound, bound, size=shape).astype(np.float64)

    def forward(self, states: np.ndarray) -> np.ndarray:
        q, _ = self.forward_cached(states)
        return q

    def forward_cached(self, states: np.ndarray) -> tuple[np.ndarray, dict]:
        x = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if x.shape[1] != self.state_dim:
            raise ValueError(f"expected state dim {self.state_dim}, got {x.shape[1]}")
        cache: dict = {"inputs": [x]}
        h = x
        for i in range(len(self.hidden)):
            z = h @ self.params[f"w{i}"] + self.params[f"b{i}"]
            h = np.maximum(z, 0.0)
            cache.setdefault("pre", []).append(z)
            cache["inputs"].append(h)
        value = h @ self.params["wv"] + self.params["bv"]
        advantage = h @ self.params["wa"] + self.params["ba"]
        q = value + advantage - advantage.mean(axis=1, keepdims=True)
        cache["trunk_out"] = h
        return q, cache

    def backward(self, cache: dict, dq: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given dLoss/dQ."""
        grads: dict[str, np.ndarray] = {}
        h = cache["trunk_out"]
        dvalue = dq.sum(axis=1, keepdims=True)
        dadv = dq - dq.sum(axis=1, keepdims=True) / self.num_actions
        grads["wv"] = h.T @ dvalue
        grads["bv"] = dvalue.sum(axis=0)
        grads["wa"] = h.T @ dadv
        grads["ba"] = dadv.sum(axis=0)
        dh = dvalue @ self.params["wv"].T + dadv @ self.params["wa"].T
        for i in range(len(self.hidden) - 1, -1, -1):
            dz = dh * (cache["pre"][i] > 0.0)
            grads[f"w{i}"] = cache["inputs"][i].T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            dh = dz @ self.params[f"w{i}"].T
        return grads

    def copy_from(self, other: "QNetwork") -> None:
        for key, value in other.params.items():
            self.params[key] = value.copy()

    def clone(self) -> "QNetwork":
        twin = QNetwork(self.state_dim, self.num_actions, self.hidden)
        twin.copy_from(self)
        return twin


def sync_target(net: QNetwork, target_net: QNetwork) -> None:
    """Hard-copy the online parameters into the target network."""
    target_net.copy_from(net)


def masked_argmax(q: np.ndarray, mask: np.ndarray) -> int:
    """Highest-Q allowed action; ties resolve to the lowest index."""
    if not mask.any():
        raise ValueError("no action is allowed")
    scores = np.where(mask, q, -np.inf)
    return int(np.argmax(scores))


def act(
    net: QNetwork,
    state: np.ndarray,
    mask: np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
) -> int:
    """Epsilon-greedy action over the allowed set."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no action is allowed")
    if rng.random() < epsilon:
        allowed = np.flatnonzero(mask)
        return int(allowed[rng.integers(len(allowed))])
    q = net.forward(state)[0]
    return masked_argmax(q, mask)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool
    next_mask: np.ndarray


class PrioritizedReplayBuffer:
    """Ring buffer with proportional prioritized sampling."""

    def __init__(self, capacity: int = 2000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._data: list[Transition] = []
        self._priorities = np.zeros(capacity, dtype=np.float64)
        self._next = 0

    def __len__(self) -> int:
        return len(self._data)

    def push(self, transition: Transition) -> None:
        """Insert with the current maximum priority so it gets sampled soon."""
        priority = self._priorities[: len(self._data)].max() if self._data else 1.0
        if len(self._data) < self.capacity:
            self._data.append(transition)
        else:
            self._data[self._next] = transition
        self._priorities[self._next] = priority
        self._next = (self._next + 1) % self.capacity

    def sample(
        self, batch_size: int, alpha: float, beta: float, rng: np.random.Generator
    ) -> tuple[np.ndarray, list[Transition], np.ndarray]:
        """Sample indices with probability proportional to priority**alpha.

        Returns (indices, transitions, importance weights); weights are
        normalized by the batch maximum.
        """
        n = len(self._data)
        if n < batch_size:
            raise ValueError("not enough transitions to sample a batch")
        scaled = self._priorities[:n] ** alpha
        probs = scaled / scaled.sum()
        indices = rng.choice(n, size=batch_size, replace=True, p=probs)
        weights = (n * probs[indices]) ** (-beta)
        weights = weights / weights.max()
        return indices, [self._data[i] for i in indices], weights

    def update_priorities(self, indices: np.ndarray, td_errors: np.ndarray) -> None:
        self._priorities[indices] = np.abs(td_errors) + 1e-6


class AdamOptimizer:
    """Adam with bias correction, one slot pair per parameter tensor."""

    def __init__(self, params: dict[str, np.ndarray], config: AgentConfig):
        self.lr = config.lr
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.eps = config.adam_eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for key, grad in grads.items():
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * grad
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * grad**2
            m_hat = self.m[key] / correct1
            v_hat = self.v[key] / correct2
            params[key] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def huber(x: np.ndarray, delta: float) -> np.ndarray:
    absx = np.abs(x)
    return np.where(absx <= delta, 0.5 * x**2, delta * (absx - 0.5 * delta))


def train_step(
    net: QNetwork,
    target_net: QNetwork,
    buffer: PrioritizedReplayBuffer,
    config: AgentConfig,
    optimizer: AdamOptimizer,
    rng: np.random.Generator,
) -> float:
    """One double-DQN update on a prioritized batch; returns the loss."""
    indices, batch, weights = buffer.sample(
        config.batch_size, config.per_alpha, config.per_beta, rng
    )
    states = np.stack([t.state for t in batch])
    actions = np.array([t.action for t in batch], dtype=np.int64)
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    next_states = np.stack([t.next_state for t in batch])
    next_masks = np.stack([t.next_mask for t in batch]).astype(bool)
    done = np.array([t.done for t in batch], dtype=np.float64)

    # terminal rows may have empty masks; their bootstrap term is zeroed anyway
    has_next = next_masks.any(axis=1)
    safe_masks = next_masks.copy()
    safe_masks[~has_next, 0] = True
    done = np.maximum(done, (~has_next).astype(np.float64))

    online_next = net.forward(next_states)
    best_next = np.argmax(np.where(safe_masks, online_next, -np.inf), axis=1)
    target_next = target_net.forward(next_states)[np.arange(len(batch)), best_next]
    targets = rewards + config.gamma * (1.0 - done) * target_next

    q_all, cache = net.forward_cached(states)
    q_taken = q_all[np.arange(len(batch)), actions]
    td = q_taken - targets

    loss = float(np.mean(weights * huber(td, config.huber_delta)))
    dq_taken = weights * np.clip(td, -config.huber_delta, config.huber_delta) / len(batch)
    dq = np.zeros_like(q_all)
    dq[np.arange(len(batch)), actions] = dq_taken
    grads = net.backward(cache, dq)
    optimizer.step(net.params, grads)
    buffer.update_priorities(indices, td)
    return loss


class DqnAgent:
    """Convenience wrapper tying the network, target, buffer and Adam together."""

    def __init__(self, config: AgentConfig, state_dim: int, num_actions: int, seed: int = 0):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.net = QNetwork(state_dim, num_actions, config.hidden, self.rng)
        self.target = self.net.clone()
        self.buffer = PrioritizedReplayBuffer(config.buffer_capacity)
        self.optimizer = AdamOptimizer(self.net.params, config)
        self.train_steps = 0

    @property
    def epsilon(self) -> float:
        return epsilon_at(self.train_steps, self.config)

    def act(self, state: np.ndarray, mask: np.ndarray, greedy: bool = False) -> int:
        eps = 0.0 if greedy else self.epsilon
        return act(self.net, state, mask, eps, self.rng)

    def observe(self, transition: Transition) -> None:
        self.buffer.push(transition)

    def learn(self) -> float | None:
        """Run one training step once the buffer can fill a batch."""
        if len(self.buffer) < self.config.batch_size:
            return None
        loss = train_step(
            self.net, self.target, self.buffer, self.config, self.optimizer, self.rng
        )
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss diverged to {loss}")
        self.train_steps += 1
        if self.train_steps % self.config.target_sync_every == 0:
            sync_target(self.net, self.target)
        return loss

    # -- checkpointing ----------------------------------------------------

    def save(self, path: str) -> None:
        """Write config, parameters, iteration count and RNG state."""
        arrays = {f"net.{k}": v for k, v in self.net.params.items()}
        arrays.update({f"target.{k}": v for k, v in self.target.params.items()})
        arrays.update({f"adam.m.{k}": v for k, v in self.optimizer.m.items()})
        arrays.update({f"adam.v.{k}": v for k, v in self.optimizer.v.items()})
        header = {
            "version": 1,
            "config": asdict(self.config),
            "state_dim": self.net.state_dim,
            "num_actions": self.net.num_actions,
            "train_steps": self.train_steps,
            "adam_t": self.optimizer.t,
            "rng_state": self.rng.bit_generator.state,
        }
        with open(path, "wb") as fh:
            np.savez(fh, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path: str) -> "DqnAgent":
        try:
            with np.load(path) as blob:
                header = json.loads(bytes(blob["header"]).decode())
                arrays = {k: blob[k] for k in blob.files if k != "header"}
        except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if header.get("version") != 1:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
        raw = dict(header["config"])
        raw["hidden"] = tuple(raw["hidden"])
        config = AgentConfig(**raw)
        agent = cls(config, header["state_dim"], header["num_actions"])
        for scope, params in (("net", agent.net.params), ("target", agent.target.params)):
            for key, expected in params.items():
                stored = arrays.get(f"{scope}.{key}")
                if stored is None or stored.shape != expected.shape:
                    raise CheckpointError(
                        f"checkpoint parameter {scope}.{key} is missing or has the wrong shape"
                    )
                params[key] = stored.astype(np.float64)
        for slot, target in (("m", agent.optimizer.m), ("v", agent.optimizer.v)):
            for key in target:
                stored = arrays.get(f"adam.{slot}.{key}")
                if stored is None or stored.shape != target[key].shape:
                    raise CheckpointError(f"checkpoint slot adam.{slot}.{key} is missing or malformed")
                target[key] = stored.astype(np.float64)
        agent.train_steps = int(header["train_steps"])
        agent.optimizer.t = int(header["adam_t"])
        state = header["rng_state"]
        agent.rng = np.random.default_rng()
        agent.rng.bit_generator.state = state
        return agent
