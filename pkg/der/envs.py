"""Cooperative environments with a team reward and per-agent done flags."""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
import numpy.typing as npt

from der.diffcore import Tensor
from der.errors import ConfigError, EpisodeFinishedError, ShapeError

if TYPE_CHECKING:
    from der.config import EnvConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int
    n_actions: int
    obs_dim: int
    state_dim: int
    episode_limit: int
    reward_range: tuple[float, float]
    noop_action: int


@dataclass(frozen=True)
class StepResult:
    reward: float
    state: Tensor
    obs: Tensor
    done: npt.NDArray[np.bool_]
    team_done: bool


class CoopEnv(ABC):
    """Single-owner environment; stochasticity only enters through ``reset``."""

    @abstractmethod
    def reset(self, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        """Start an episode and return (state, obs[N])."""

    @abstractmethod
    def step(self, actions: Sequence[int]) -> StepResult: ...

    @abstractmethod
    def spec(self) -> EnvSpec: ...

    def _check_actions(self, actions: Sequence[int]) -> npt.NDArray[np.int64]:
        spec = self.spec()
        acts = np.asarray(actions, dtype=np.int64)
        if acts.shape != (spec.n_agents,):
            raise ShapeError(f"expected {spec.n_agents} actions, got shape {acts.shape}")
        if np.any(acts < 0) or np.any(acts >= spec.n_actions):
            raise ValueError(f"actions {acts.tolist()} outside [0, {spec.n_actions})")
        return acts


DEFAULT_PAYOFF = ((10.0, 2.0, 0.0), (2.0, 4.0, 2.0), (0.0, 2.0, 6.0))


class MatrixGame(CoopEnv):
    """One-step two-player game; agent 1 picks the row, agent 2 the column."""

    def __init__(self, payoff: Sequence[Sequence[float]] = DEFAULT_PAYOFF) -> None:
        self.payoff = np.asarray(payoff, dtype=np.float64)
        if self.payoff.ndim != 2 or self.payoff.shape[0] != self.payoff.shape[1]:
            raise ConfigError(f"payoff must be a square matrix, got shape {self.payoff.shape}")
        self._finished = True

    def spec(self) -> EnvSpec:
        return EnvSpec(
            n_agents=2,
            n_actions=self.payoff.shape[0],
            obs_dim=1,
            state_dim=1,
            episode_limit=1,
            reward_range=(float(self.payoff.min()), float(self.payoff.max())),
            noop_action=0,
        )

    def reset(self, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        self._finished = False
        return np.ones(1), np.ones((2, 1))

    def step(self, actions: Sequence[int]) -> StepResult:
        if self._finished:
            raise EpisodeFinishedError("matrix game episode already finished; call reset()")
        a = self._check_actions(actions)
        self._finished = True
        return StepResult(
            reward=float(self.payoff[a[0], a[1]]),
            state=np.ones(1),
            obs=np.ones((2, 1)),
            done=np.ones(2, dtype=bool),
            team_done=True,
        )


UP, DOWN, LEFT, RIGHT, STAY, ACT = range(6)
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}

DEFAULT_LAYOUT = (
    "C..G..C",
    ".H...H.",
    "...S...",
    "#.#U#.#",
    ".......",
    "C..H..C",
    "...G...",
)

_CELL_CODES = {".": 0.0, "H": 0.0, "U": 0.0, "G": 0.25, "S": 0.5, "C": 1.0}
_WALL = -1.0


class SwitchHarvest(CoopEnv):
    """Grid where harvesters collect crops only while the unlocker holds a switch.

    Observation per agent: the 3x3 window around it (wall or outside -1,
    floor 0, exit 0.25, switch 0.5, uncollected crop 1), its row and column
    scaled to [0, 1] and a role flag (1 for the unlocker). Agents that left
    through an exit observe zeros. Agents may share a cell.
    """

    OBS_DIM = 12

    def __init__(
        self,
        layout: Sequence[str] = DEFAULT_LAYOUT,
        episode_limit: int = 50,
        random_starts: bool = False,
    ) -> None:
        rows = [str(r) for r in layout]
        if not rows or len({len(r) for r in rows}) != 1:
            raise ConfigError("layout rows must be non-empty and of equal length")
        unknown = set("".join(rows)) - set(_CELL_CODES) - {"#"}
        if unknown:
            raise ConfigError(f"unknown layout symbols: {sorted(unknown)}")
        self.grid = np.array([list(r) for r in rows])
        self.height, self.width = self.grid.shape
        starts_h = [tuple(p) for p in np.argwhere(self.grid == "H")]
        starts_u = [tuple(p) for p in np.argwhere(self.grid == "U")]
        if not starts_h or not starts_u:
            raise ConfigError("layout needs at least one harvester (H) and one unlocker (U)")
        self.starts = starts_h + starts_u
        self.is_unlocker = np.array([False] * len(starts_h) + [True] * len(starts_u))
        self.crops = [tuple(p) for p in np.argwhere(self.grid == "C")]
        if not self.crops:
            raise ConfigError("layout needs at least one crop (C)")
        self.episode_limit = episode_limit
        self.random_starts = random_starts
        self._open = [tuple(p) for p in np.argwhere(np.isin(self.grid, list(".HU")))]

        self.pos = np.array(self.starts, dtype=np.int64)
        self.exited = np.zeros(len(self.starts), dtype=bool)
        self.remaining = np.ones(len(self.crops), dtype=bool)
        self.t = 0
        self._finished = True

    @property
    def n_agents(self) -> int:
        return len(self.starts)

    def spec(self) -> EnvSpec:
        n = self.n_agents
        return EnvSpec(
            n_agents=n,
            n_actions=6,
            obs_dim=self.OBS_DIM,
            state_dim=3 * n + len(self.crops) + 1,
            episode_limit=self.episode_limit,
            reward_range=(0.0, float(min(len(self.crops), int((~self.is_unlocker).sum())))),
            noop_action=STAY,
        )

    def reset(self, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        if self.random_starts:
            picks = rng.choice(len(self._open), size=self.n_agents, replace=False)
            self.pos = np.array([self._open[k] for k in picks], dtype=np.int64)
        else:
            self.pos = np.array(self.starts, dtype=np.int64)
        self.exited[:] = False
        self.remaining[:] = True
        self.t = 0
        self._finished = False
        return self.state(), self.observations()

    def _cell(self, r: int, c: int) -> str:
        if 0 <= r < self.height and 0 <= c < self.width:
            cell = self.grid[r, c]
            if cell == "C" and not self.remaining[self.crops.index((r, c))]:
                return "."
            return cell
        return "#"

    def step(self, actions: Sequence[int]) -> StepResult:
        if self._finished:
            raise EpisodeFinishedError("switch-harvest episode already finished; call reset()")
        acts = self._check_actions(actions)
        for i, a in enumerate(acts):
            if self.exited[i]:
                continue
            r, c = self.pos[i]
            if a in _MOVES:
                dr, dc = _MOVES[a]
                if self._cell(r + dr, c + dc) != "#":
                    self.pos[i] = (r + dr, c + dc)
            elif a == ACT and self.grid[r, c] == "G":
                self.exited[i] = True

        reward = 0.0
        active = ~self.exited
        switch_held = any(self.grid[tuple(self.pos[i])] == "S" for i in np.flatnonzero(active & self.is_unlocker))
        if switch_held:
            for i in np.flatnonzero(active & ~self.is_unlocker):
                cell = tuple(int(v) for v in self.pos[i])
                if cell in self.crops and self.remaining[self.crops.index(cell)]:
                    self.remaining[self.crops.index(cell)] = False
                    reward += 1.0

        self.t += 1
        team_done = bool(not self.remaining.any() or self.exited.all() or self.t >= self.episode_limit)
        self._finished = team_done
        done = self.exited.copy() if not team_done else np.ones(self.n_agents, dtype=bool)
        return StepResult(reward, self.state(), self.observations(), done, team_done)

    def observations(self) -> Tensor:
        obs = np.zeros((self.n_agents, self.OBS_DIM))
        for i in range(self.n_agents):
            if self.exited[i]:
                continue
            r, c = self.pos[i]
            window = [
                _WALL if (cell := self._cell(r + dr, c + dc)) == "#" else _CELL_CODES[cell]
                for dr in (-1, 0, 1)
                for dc in (-1, 0, 1)
            ]
            obs[i, :9] = window
            obs[i, 9] = r / max(self.height - 1, 1)
            obs[i, 10] = c / max(self.width - 1, 1)
            obs[i, 11] = float(self.is_unlocker[i])
        return obs

    def state(self) -> Tensor:
        scale = np.array([max(self.height - 1, 1), max(self.width - 1, 1)], dtype=np.float64)
        return np.concatenate(
            [
                (self.pos / scale).ravel(),
                self.exited.astype(np.float64),
                self.remaining.astype(np.float64),
                [self.t / self.episode_limit],
            ]
        )


def make_env(config: "EnvConfig") -> CoopEnv:
    if config.name == "matrix_game":
        env: CoopEnv = MatrixGame(config.payoff or DEFAULT_PAYOFF)
    elif config.name == "switch_harvest":
        env = SwitchHarvest(
            layout=config.layout or DEFAULT_LAYOUT,
            episode_limit=config.episode_limit,
            random_starts=config.random_starts,
        )
    else:
        raise ConfigError(f"unknown environment {config.name!r}")
    logger.debug("created %s environment: %s", config.name, env.spec())
    return env
