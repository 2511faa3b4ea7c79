import numpy as np
import pytest

from der.config import EnvConfig
from der.envs import ACT, DOWN, LEFT, RIGHT, STAY, UP, MatrixGame, SwitchHarvest, make_env
from der.errors import ConfigError, EpisodeFinishedError, ShapeError

SMALL_LAYOUT = [
    "C.S",
    "H.U",
    "G..",
]


def test_matrix_game_spec_and_payoffs():
    env = MatrixGame()
    spec = env.spec()
    assert (spec.n_agents, spec.n_actions, spec.episode_limit) == (2, 3, 1)
    assert spec.reward_range == (0.0, 10.0)
    rng = np.random.default_rng(0)
    for actions, expected in [((0, 0), 10.0), ((2, 2), 6.0), ((0, 2), 0.0), ((1, 1), 4.0)]:
        state, obs = env.reset(rng)
        np.testing.assert_array_equal(state, [1.0])
        np.testing.assert_array_equal(obs, [[1.0], [1.0]])
        result = env.step(actions)
        assert result.reward == expected
        assert result.team_done
        assert result.done.all()


def test_matrix_game_cannot_step_after_end():
    env = MatrixGame()
    env.reset(np.random.default_rng(0))
    env.step((0, 0))
    with pytest.raises(EpisodeFinishedError):
        env.step((0, 0))


def test_matrix_game_validates_actions():
    env = MatrixGame()
    env.reset(np.random.default_rng(0))
    with pytest.raises(ShapeError):
        env.step((0,))
    with pytest.raises(ValueError):
        env.step((0, 3))


def test_switch_harvest_default_spec():
    env = SwitchHarvest()
    spec = env.spec()
    assert spec.n_agents == 4
    assert spec.n_actions == 6
    assert spec.episode_limit == 50
    assert spec.obs_dim == 12
    _, obs = env.reset(np.random.default_rng(0))
    assert obs.shape == (4, spec.obs_dim)
    assert env.state().shape == (spec.state_dim,)


def test_fixed_layout_reset_is_deterministic():
    a = SwitchHarvest().reset(np.random.default_rng(1))
    b = SwitchHarvest().reset(np.random.default_rng(2))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_random_starts_follow_the_rng():
    first = SwitchHarvest(random_starts=True).reset(np.random.default_rng(7))
    second = SwitchHarvest(random_starts=True).reset(np.random.default_rng(7))
    np.testing.assert_array_equal(first[1], second[1])


def test_harvest_needs_the_switch():
    env = SwitchHarvest(SMALL_LAYOUT, episode_limit=10)
    env.reset(np.random.default_rng(0))
    # harvester steps onto the crop while the unlocker is off the switch
    alone = env.step((UP, STAY))
    assert alone.reward == 0.0
    # unlocker moves onto the switch, harvester is still on the crop
    together = env.step((STAY, UP))
    assert together.reward == 1.0
    # the crop is gone, so the episode ends
    assert together.team_done


def test_exit_sets_agent_done_and_others_continue():
    env = SwitchHarvest(SMALL_LAYOUT, episode_limit=10)
    env.reset(np.random.default_rng(0))
    moved = env.step((DOWN, STAY))
    assert not moved.team_done
    exited = env.step((ACT, LEFT))
    np.testing.assert_array_equal(exited.done, [True, False])
    assert not exited.team_done
    np.testing.assert_array_equal(exited.obs[0], np.zeros(12))
    assert exited.obs[1].any()


def test_episode_limit_ends_episode():
    env = SwitchHarvest(SMALL_LAYOUT, episode_limit=3)
    env.reset(np.random.default_rng(0))
    results = [env.step((STAY, STAY)) for _ in range(3)]
    assert [r.team_done for r in results] == [False, False, True]
    assert results[-1].done.all()
    with pytest.raises(EpisodeFinishedError):
        env.step((STAY, STAY))


def test_walls_and_edges_block_moves():
    env = SwitchHarvest(["C#H", "S.U"], episode_limit=5)
    env.reset(np.random.default_rng(0))
    env.step((LEFT, RIGHT))
    np.testing.assert_array_equal(env.pos, [[0, 2], [1, 2]])
    env.step((UP, DOWN))
    np.testing.assert_array_equal(env.pos, [[0, 2], [1, 2]])


def test_observation_window_codes():
    env = SwitchHarvest(SMALL_LAYOUT, episode_limit=5)
    _, obs = env.reset(np.random.default_rng(0))
    harvester = obs[0]
    # window around (1, 0): outside column on the left
    np.testing.assert_array_equal(harvester[:9], [-1, 1.0, 0.0, -1, 0.0, 0.0, -1, 0.25, 0.0])
    assert harvester[9] == pytest.approx(0.5)
    assert harvester[10] == 0.0
    assert harvester[11] == 0.0
    assert obs[1][11] == 1.0


def test_rewards_stay_within_range():
    env = SwitchHarvest()
    spec = env.spec()
    rng = np.random.default_rng(4)
    for _ in range(5):
        env.reset(rng)
        total = 0.0
        while True:
            result = env.step(rng.integers(spec.n_actions, size=spec.n_agents))
            assert spec.reward_range[0] <= result.reward <= spec.reward_range[1]
            total += result.reward
            if result.team_done:
                break
        assert total <= 4


def test_layout_validation():
    with pytest.raises(ConfigError):
        SwitchHarvest(["H.", "U"])
    with pytest.raises(ConfigError):
        SwitchHarvest(["HX", "UC"])
    with pytest.raises(ConfigError):
        SwitchHarvest(["H.", ".C"])


def test_make_env():
    assert isinstance(make_env(EnvConfig(name="matrix_game")), MatrixGame)
    env = make_env(EnvConfig(name="switch_harvest", layout=SMALL_LAYOUT, episode_limit=9))
    assert isinstance(env, SwitchHarvest)
    assert env.spec().episode_limit == 9
