"""Episodic replay, joint-to-single-agent division and prioritised selection.

Division assigns every agent of a joint transition the individual reward

    r_i = (R + gamma * Q~_tot - Q_tot) * dQ_tot/dQ_i - gamma * Q~_i + Q_i

which makes the per-agent squared TD losses produce exactly the same
gradient for the shared agent network as the joint TD loss. Individual
rewards depend on the current parameters, so they are recomputed for every
mini-batch and never stored in the buffer.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterator, overload

import numpy as np
import numpy.typing as npt

from der.diffcore import Tensor
from der.errors import InsufficientEpisodesError, NonFiniteError, ReplayError, ShapeError
from der.qnets import ParamStore, agent_q_values, encode_inputs, greedy_targets, mix_batch

logger = logging.getLogger(__name__)

IntArray = npt.NDArray[np.int64]
BoolArray = npt.NDArray[np.bool_]


@dataclass(frozen=True)
class JointTransition:
    """One environment step for the whole team.

    ``last_actions`` holds each agent's previous action, -1 on the first step.
    """

    obs: Tensor
    actions: IntArray
    last_actions: IntArray
    state: Tensor
    reward: float
    next_obs: Tensor
    next_state: Tensor
    done: BoolArray
    team_done: bool
    t: int

    def __post_init__(self) -> None:
        n = len(self.actions)
        if not (len(self.obs) == len(self.next_obs) == len(self.done) == len(self.last_actions) == n):
            raise ShapeError("per-agent fields of a joint transition must all have length N")
        if not math.isfinite(self.reward):
            raise NonFiniteError(f"team reward {self.reward} is not finite")

    @property
    def n_agents(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class Episode:
    transitions: tuple[JointTransition, ...]
    episode_id: int = -1

    def __post_init__(self) -> None:
        if any(tr.team_done for tr in self.transitions[:-1]):
            raise ReplayError("team_done may only be set on the last transition")

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def terminal(self) -> bool:
        return bool(self.transitions) and self.transitions[-1].team_done

    @property
    def team_return(self) -> float:
        return float(sum(tr.reward for tr in self.transitions))


class ReplayBuffer:
    """FIFO ring of whole episodes."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ReplayError("replay capacity must be at least one episode")
        self.capacity = capacity
        self._episodes: list[Episode] = []
        self._next_idx = 0
        self.inserted = 0

    def __len__(self) -> int:
        return len(self._episodes)

    def push_episode(self, episode: Episode) -> None:
        if not episode.transitions:
            raise ReplayError("cannot store an empty episode")
        stored = Episode(episode.transitions, episode_id=self.inserted)
        if self._next_idx >= len(self._episodes):
            self._episodes.append(stored)
        else:
            self._episodes[self._next_idx] = stored
        self._next_idx = (self._next_idx + 1) % self.capacity
        self.inserted += 1
        if self.inserted == self.capacity:
            logger.debug("replay buffer full at %d episodes; oldest are now evicted", self.capacity)

    def episodes(self) -> list[Episode]:
        """Stored episodes, oldest first."""
        if len(self._episodes) < self.capacity:
            return list(self._episodes)
        return self._episodes[self._next_idx :] + self._episodes[: self._next_idx]

    def sample_joint_minibatch(self, batch_size: int, rng: np.random.Generator) -> list[Episode]:
        """Uniform sample of episodes without replacement."""
        if batch_size < 1 or len(self) < batch_size:
            raise InsufficientEpisodesError(
                f"need {batch_size} episodes, buffer holds {len(self)}"
            )
        ordered = self.episodes()
        picks = rng.choice(len(ordered), size=batch_size, replace=False)
        return [ordered[i] for i in picks]


@dataclass(frozen=True)
class JointBatch:
    """Unpadded joint transitions of a mini-batch, one row per real step."""

    obs: Tensor
    actions: IntArray
    last_actions: IntArray
    state: Tensor
    reward: Tensor
    next_obs: Tensor
    next_state: Tensor
    done: BoolArray
    team_done: BoolArray
    episode_id: IntArray
    t: IntArray

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode]) -> "JointBatch":
        """Pad episodes to a common length, then drop the padded steps by mask."""
        if not episodes or any(len(ep) == 0 for ep in episodes):
            raise ReplayError("a joint batch needs at least one non-empty episode")
        horizon = max(len(ep) for ep in episodes)
        first = episodes[0].transitions[0]
        n, obs_dim, state_dim = first.n_agents, first.obs.shape[-1], first.state.shape[-1]
        size = (len(episodes), horizon)
        padded = {
            "obs": np.zeros(size + (n, obs_dim)),
            "actions": np.zeros(size + (n,), dtype=np.int64),
            "last_actions": np.full(size + (n,), -1, dtype=np.int64),
            "state": np.zeros(size + (state_dim,)),
            "reward": np.zeros(size),
            "next_obs": np.zeros(size + (n, obs_dim)),
            "next_state": np.zeros(size + (state_dim,)),
            "done": np.zeros(size + (n,), dtype=bool),
            "team_done": np.zeros(size, dtype=bool),
            "episode_id": np.zeros(size, dtype=np.int64),
            "t": np.zeros(size, dtype=np.int64),
        }
        mask = np.zeros(size, dtype=bool)
        for b, episode in enumerate(episodes):
            for k, tr in enumerate(episode.transitions):
                mask[b, k] = True
                for name, array in padded.items():
                    array[b, k] = episode.episode_id if name == "episode_id" else getattr(tr, name)
        return cls(**{name: array[mask] for name, array in padded.items()})

    @property
    def size(self) -> int:
        return len(self.reward)

    @property
    def n_agents(self) -> int:
        return self.actions.shape[1]

    def inputs(self, n_actions: int) -> Tensor:
        return encode_inputs(self.obs, self.last_actions, n_actions)

    def next_inputs(self, n_actions: int) -> Tensor:
        return encode_inputs(self.next_obs, self.actions, n_actions)


@dataclass(frozen=True)
class Bootstrap:
    """Target-network values with terminal masking already applied."""

    q_tot: Tensor
    per_agent: Tensor


def compute_targets(batch: JointBatch, params: ParamStore) -> Bootstrap:
    """Q~_tot zeroed where the team is done; Q~_i zeroed where agent i is done."""
    greedy = greedy_targets(params, batch.next_inputs(params.dims.n_actions), batch.next_state)
    if not (np.all(np.isfinite(greedy.q_tot)) and np.all(np.isfinite(greedy.per_agent))):
        raise NonFiniteError("target network produced non-finite values")
    return Bootstrap(
        q_tot=np.where(batch.team_done, 0.0, greedy.q_tot),
        per_agent=np.where(batch.done, 0.0, greedy.per_agent),
    )


@dataclass(frozen=True)
class SingleAgentTransition:
    agent: int
    inputs: Tensor
    action: int
    reward: float
    next_inputs: Tensor
    done: bool
    td_error: float
    bootstrap: float
    episode_id: int
    t: int


@dataclass(frozen=True)
class SingleAgentSet(Sequence[SingleAgentTransition]):
    """Divided transitions stored column-wise; row ``r * N + i`` is agent i of row r."""

    agent: IntArray
    inputs: Tensor
    actions: IntArray
    rewards: Tensor
    next_inputs: Tensor
    done: BoolArray
    td_errors: Tensor
    bootstrap: Tensor
    q_values: Tensor
    grads_g: Tensor
    joint_td: Tensor
    episode_id: IntArray
    t: IntArray

    def __len__(self) -> int:
        return len(self.rewards)

    @overload
    def __getitem__(self, index: int) -> SingleAgentTransition: ...

    @overload
    def __getitem__(self, index: slice) -> "SingleAgentSet": ...

    def __getitem__(self, index):
        if isinstance(index, slice):
            return self.subset(np.arange(len(self))[index])
        return SingleAgentTransition(
            agent=int(self.agent[index]),
            inputs=self.inputs[index],
            action=int(self.actions[index]),
            reward=float(self.rewards[index]),
            next_inputs=self.next_inputs[index],
            done=bool(self.done[index]),
            td_error=float(self.td_errors[index]),
            bootstrap=float(self.bootstrap[index]),
            episode_id=int(self.episode_id[index]),
            t=int(self.t[index]),
        )

    def subset(self, indices: npt.ArrayLike) -> "SingleAgentSet":
        idx = np.asarray(indices, dtype=np.int64)
        return SingleAgentSet(**{name: getattr(self, name)[idx] for name in self.__dataclass_fields__})


def individual_rewards(
    joint_td: npt.ArrayLike,
    grads_g: npt.ArrayLike,
    q_chosen: npt.ArrayLike,
    bootstrap: npt.ArrayLike,
    gamma: float,
) -> tuple[Tensor, Tensor]:
    """Individual rewards r_i and their TD errors; arguments broadcast elementwise.

    ``joint_td`` is R + gamma * Q~_tot - Q_tot, ``bootstrap`` the masked Q~_i.
    """
    delta = np.asarray(joint_td, dtype=np.float64)
    q = np.asarray(q_chosen, dtype=np.float64)
    q_next = np.asarray(bootstrap, dtype=np.float64)
    rewards = delta * np.asarray(grads_g, dtype=np.float64) - gamma * q_next + q
    return rewards, rewards + gamma * q_next - q


def divide(
    batch: JointBatch,
    params: ParamStore,
    gamma: float,
    targets: Bootstrap | None = None,
) -> SingleAgentSet:
    """Split each joint transition into N single-agent transitions.

    Rewards and TD errors are plain arrays: nothing downstream differentiates
    through them.
    """
    dims = params.dims
    if batch.n_agents != dims.n_agents:
        raise ShapeError(f"batch has {batch.n_agents} agents, network expects {dims.n_agents}")
    if targets is None:
        targets = compute_targets(batch, params)
    rows, n = batch.size, batch.n_agents
    inputs = batch.inputs(dims.n_actions)
    q_all = agent_q_values(params.agent(), inputs.reshape(rows * n, -1)).reshape(rows, n, -1)
    q_chosen = np.take_along_axis(q_all, batch.actions[..., None], axis=-1)[..., 0]
    mixed = mix_batch(params.mixer, params.mixer_params(), q_chosen, batch.state)
    if not (np.all(np.isfinite(q_chosen)) and np.all(np.isfinite(mixed.q_tot))):
        raise NonFiniteError("online network produced non-finite Q-values")

    joint_td = batch.reward + gamma * targets.q_tot - mixed.q_tot
    rewards, td_errors = individual_rewards(joint_td[:, None], mixed.grads_g, q_chosen, targets.per_agent, gamma)
    return SingleAgentSet(
        agent=np.tile(np.arange(n), rows),
        inputs=inputs.reshape(rows * n, -1),
        actions=batch.actions.reshape(-1),
        rewards=rewards.reshape(-1),
        next_inputs=batch.next_inputs(dims.n_actions).reshape(rows * n, -1),
        done=batch.done.reshape(-1),
        td_errors=td_errors.reshape(-1),
        bootstrap=targets.per_agent.reshape(-1),
        q_values=q_chosen.reshape(-1),
        grads_g=mixed.grads_g.reshape(-1),
        joint_td=np.repeat(joint_td, n),
        episode_id=np.repeat(batch.episode_id, n),
        t=np.repeat(batch.t, n),
    )


def priority_probs(td_errors: npt.ArrayLike, alpha: float, eps: float) -> Tensor:
    """P(j) = p_j^alpha / sum_k p_k^alpha with p_j = |delta_j| + eps."""
    delta = np.asarray(td_errors, dtype=np.float64)
    if delta.size == 0:
        raise ReplayError("cannot prioritise an empty candidate set")
    if alpha < 0 or eps < 0:
        raise ReplayError("alpha and eps must be non-negative")
    scores = np.power(np.abs(delta) + eps, alpha)
    total = scores.sum()
    if not total > 0 or not math.isfinite(total):
        raise ReplayError("priorities do not form a valid distribution")
    return scores / total


def is_weights(probs: npt.ArrayLike, count_candidates: int, beta: float) -> Tensor:
    """w_j = (1 / (count * P_j))^beta, normalised so the largest weight is 1."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p <= 0):
        raise ReplayError("importance weights need strictly positive probabilities")
    raw = np.power(1.0 / (count_candidates * p), beta)
    return raw / raw.max()


@dataclass(frozen=True)
class RatioSchedule:
    """Warm-up of the selected fraction: linear from start to end over p * t_max."""

    eta_start: float = 0.8
    eta_end: float = 1.0
    proportion: float = 0.6
    t_max: int = 1

    def __post_init__(self) -> None:
        if not 0 < self.eta_start <= self.eta_end <= 1:
            raise ReplayError("need 0 < eta_start <= eta_end <= 1")
        if not 0 < self.proportion <= 1 or self.t_max < 1:
            raise ReplayError("need 0 < proportion <= 1 and t_max >= 1")


def sample_ratio(t: float, schedule: RatioSchedule) -> float:
    if t < 0:
        raise ReplayError(f"training step {t} is negative")
    ramp = schedule.proportion * schedule.t_max
    if t >= ramp:
        return schedule.eta_end
    return schedule.eta_start + (schedule.eta_end - schedule.eta_start) * t / ramp


@dataclass(frozen=True)
class PrioritizedSample:
    transition: SingleAgentTransition
    probability: float
    weight: float


@dataclass(frozen=True)
class Selection(Sequence[PrioritizedSample]):
    candidates: SingleAgentSet
    indices: IntArray
    probabilities: Tensor
    weights: Tensor

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, k):  # type: ignore[override]
        if isinstance(k, slice):
            return [self[j] for j in range(len(self))[k]]
        return PrioritizedSample(
            transition=self.candidates[int(self.indices[k])],
            probability=float(self.probabilities[k]),
            weight=float(self.weights[k]),
        )

    def __iter__(self) -> Iterator[PrioritizedSample]:
        return (self[k] for k in range(len(self)))

    def transitions(self) -> SingleAgentSet:
        return self.candidates.subset(self.indices)


def selection_size(eta: float, count: int) -> int:
    """round(eta * count), rounding halves up."""
    return int(math.floor(eta * count + 0.5))


def select(
    candidates: SingleAgentSet,
    eta: float,
    probs: npt.ArrayLike,
    rng: np.random.Generator,
    *,
    beta: float = 1.0,
) -> Selection:
    """Draw round(eta * #S) candidates without replacement, proportionally to ``probs``."""
    p = np.asarray(probs, dtype=np.float64)
    count = len(candidates)
    if p.shape != (count,):
        raise ShapeError(f"{p.shape[0]} probabilities for {count} candidates")
    k = selection_size(eta, count)
    if k < 1:
        raise ReplayError(f"sample ratio {eta} selects no transitions out of {count}")
    indices = rng.choice(count, size=k, replace=False, p=p)
    chosen = p[indices]
    return Selection(candidates, indices, chosen, is_weights(chosen, count, beta))


def select_all(candidates: SingleAgentSet) -> Selection:
    """Every candidate with unit weight, for training without the selection stage."""
    count = len(candidates)
    return Selection(candidates, np.arange(count), np.full(count, 1.0 / count), np.ones(count))


REPLAY_DUMP_COLUMNS = ("episode_id", "t", "agent", "reward", "td_error", "probability", "weight")


class ReplayDumpWriter:
    """Appends selected single-agent transitions as CSV rows for offline analysis."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        fresh = not self.path.exists()
        self._handle: IO[str] = self.path.open("a", newline="", encoding="utf-8")
        self._writer = csv.writer(self._handle)
        if fresh:
            self._writer.writerow(REPLAY_DUMP_COLUMNS)

    def write(self, selection: Selection) -> None:
        chosen = selection.transitions()
        for k in range(len(selection)):
            self._writer.writerow(
                (
                    int(chosen.episode_id[k]),
                    int(chosen.t[k]),
                    int(chosen.agent[k]),
                    repr(float(chosen.rewards[k])),
                    repr(float(chosen.td_errors[k])),
                    repr(float(selection.probabilities[k])),
                    repr(float(selection.weights[k])),
                )
            )
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "ReplayDumpWriter":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()
