"""Shared fixtures for the test suite."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from der import diffcore
from der.derbuffer import Episode, JointTransition
from der.qnets import MixerKind, NetDims, init_params

settings.register_profile(
    "ci",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("ci")


@pytest.fixture(autouse=True, scope="session")
def checked_mode():
    previous = diffcore.CHECKED
    diffcore.CHECKED = True
    yield
    diffcore.CHECKED = previous


@pytest.fixture
def dims():
    return NetDims(n_agents=3, n_actions=4, obs_dim=5, state_dim=6, agent_hidden=(8, 8), mixer_embed=7)


@pytest.fixture(params=[MixerKind.VDN, MixerKind.MONOTONIC], ids=lambda k: k.value)
def mixer_kind(request):
    return request.param


@pytest.fixture
def store(dims, mixer_kind):
    return init_params(7, dims, mixer_kind)


def random_episode(rng, dims, length, *, terminal=True, done_agent=None):
    """A synthetic episode with random observations, states and rewards.

    ``done_agent`` marks one agent as exited on every step.
    """
    n = dims.n_agents
    transitions = []
    last = np.full(n, -1)
    obs = rng.normal(size=(n, dims.obs_dim))
    state = rng.normal(size=dims.state_dim)
    for t in range(length):
        actions = rng.integers(dims.n_actions, size=n)
        next_obs = rng.normal(size=(n, dims.obs_dim))
        next_state = rng.normal(size=dims.state_dim)
        done = np.zeros(n, dtype=bool)
        if done_agent is not None:
            done[done_agent] = True
        team_done = terminal and t == length - 1
        if team_done:
            done[:] = True
        transitions.append(
            JointTransition(
                obs=obs,
                actions=actions,
                last_actions=last,
                state=state,
                reward=float(rng.normal()),
                next_obs=next_obs,
                next_state=next_state,
                done=done,
                team_done=team_done,
                t=t,
            )
        )
        obs, state, last = next_obs, next_state, actions
    return Episode(tuple(transitions))


@pytest.fixture
def make_episode(dims):
    def _make(rng, length, **kwargs):
        return random_episode(rng, dims, length, **kwargs)

    return _make
