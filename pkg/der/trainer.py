"""Training loop: rollouts, mixer update, division, selection, agent update.

Each collected episode is followed by at most one update. An update runs, in
order:

1. sample a mini-batch of episodes and compute the target-network bootstrap
2. update the mixer with the joint TD loss (Q_i held fixed)
3. divide the joint transitions into single-agent transitions
4. prioritise them by |TD error| and keep a fraction eta of them
5. update the shared agent network with the weighted individual TD loss
6. copy online parameters to the targets when t_step crosses a multiple of I

``joint-baseline`` replaces steps 2-5 with one conventional update of both
networks through the joint loss; ``divide-only`` keeps every divided
transition with unit weight.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np

from der.config import RunConfig, TrainConfig
from der.derbuffer import (
    Bootstrap,
    Episode,
    JointBatch,
    JointTransition,
    RatioSchedule,
    ReplayBuffer,
    ReplayDumpWriter,
    Selection,
    compute_targets,
    divide,
    priority_probs,
    sample_ratio,
    select,
    select_all,
)
from der.diffcore import Graph, GraphBuilder, Tensor, backward, forward
from der.envs import CoopEnv, make_env
from der.errors import ReplayError
from der.metrics import MetricsRow
from der.optim import Optimizer, clip_grad_norm, make_optimizer
from der.qnets import (
    AgentNetParams,
    MixerKind,
    NetDims,
    ParamStore,
    add_agent_nets,
    add_mixer,
    agent_q_values,
    encode_inputs,
    init_params,
    n_agent_layers,
    one_hot,
)
from tools.checkpoint_db import save_checkpoint

logger = logging.getLogger(__name__)


class MetricsSink(Protocol):
    def append(self, row: MetricsRow) -> None: ...


# -- schedules -----------------------------------------------------------------


def epsilon_at(t: int, cfg: TrainConfig) -> float:
    if t >= cfg.epsilon_anneal_steps:
        return cfg.epsilon_end
    return cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * t / cfg.epsilon_anneal_steps


def beta_at(t: int, cfg: TrainConfig) -> float:
    if t >= cfg.t_max:
        return cfg.beta_end
    return cfg.beta_start + (cfg.beta_end - cfg.beta_start) * t / cfg.t_max


def ratio_schedule(cfg: TrainConfig) -> RatioSchedule:
    return RatioSchedule(cfg.eta_start, cfg.eta_end, cfg.eta_proportion, cfg.t_max)


# -- rollouts ------------------------------------------------------------------


def _agent_params(params: ParamStore | AgentNetParams) -> AgentNetParams:
    return params.agent() if isinstance(params, ParamStore) else params


def run_episode(
    env: CoopEnv,
    params: ParamStore | AgentNetParams,
    epsilon: float,
    rng: np.random.Generator,
) -> Episode:
    """Roll out one episode with per-agent epsilon-greedy actions.

    Each agent's action depends only on its own observation, previous action
    and index. Agents that are done take the environment's no-op action.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon {epsilon} outside [0, 1]")
    agent = _agent_params(params)
    spec = env.spec()
    state, obs = env.reset(rng)
    last = np.full(spec.n_agents, -1, dtype=np.int64)
    done = np.zeros(spec.n_agents, dtype=bool)
    transitions: list[JointTransition] = []
    for t in range(spec.episode_limit):
        q = agent_q_values(agent, encode_inputs(obs, last, spec.n_actions))
        actions = np.argmax(q, axis=1).astype(np.int64)
        for i in range(spec.n_agents):
            if done[i]:
                actions[i] = spec.noop_action
            elif epsilon > 0.0 and rng.random() < epsilon:
                actions[i] = rng.integers(spec.n_actions)
        result = env.step(actions)
        transitions.append(
            JointTransition(
                obs=obs,
                actions=actions,
                last_actions=last,
                state=state,
                reward=result.reward,
                next_obs=result.obs,
                next_state=result.state,
                done=result.done,
                team_done=result.team_done,
                t=t,
            )
        )
        if result.team_done:
            break
        state, obs, last, done = result.state, result.obs, actions, result.done
    return Episode(tuple(transitions))


def evaluate(
    params: ParamStore | AgentNetParams,
    env: CoopEnv,
    episodes: int,
    rng: np.random.Generator,
) -> float:
    """Mean team return of greedy (epsilon = 0) episodes."""
    if episodes < 1:
        raise ValueError("evaluation needs at least one episode")
    returns = [run_episode(env, params, 0.0, rng).team_return for _ in range(episodes)]
    return float(np.mean(returns))


# -- losses --------------------------------------------------------------------


@dataclass(frozen=True)
class LossResult:
    """Loss value, per-row TD residuals and gradients for every online parameter.

    Parameters outside the updated group carry explicit zero gradients.
    """

    value: float
    residuals: Tensor
    grads: dict[str, Tensor]

    def group(self, names: list[str]) -> dict[str, Tensor]:
        return {name: self.grads[name] for name in names}


def _weighted_sqerr(b: GraphBuilder, prediction: int) -> int:
    b.probe(prediction, "prediction")
    return b.sum(b.mul(b.sqerr(b.const("y"), prediction), b.const("w")))


@lru_cache(maxsize=None)
def mixer_loss_graph(kind: MixerKind, n_agents: int) -> tuple[Graph, int]:
    """Joint TD loss over constant Q_i inputs ``q.{i}``."""
    b = GraphBuilder()
    qs = [b.const(f"q.{i}") for i in range(n_agents)]
    state = b.const("state") if kind is MixerKind.MONOTONIC else None
    loss = _weighted_sqerr(b, add_mixer(b, kind, qs, state))
    return b.build(), loss


@lru_cache(maxsize=None)
def joint_loss_graph(kind: MixerKind, n_agents: int, n_hidden: int) -> tuple[Graph, int]:
    """Joint TD loss backpropagated through the shared agent network and the mixer."""
    b = GraphBuilder()
    qs = add_agent_nets(b, n_agents, n_hidden)
    state = b.const("state") if kind is MixerKind.MONOTONIC else None
    loss = _weighted_sqerr(b, add_mixer(b, kind, qs, state))
    return b.build(), loss


@lru_cache(maxsize=None)
def individual_loss_graph(n_hidden: int) -> tuple[Graph, int]:
    """sum_j w_j (y_j - Q(x_j)[a_j])^2 over single-agent rows."""
    b = GraphBuilder()
    (q,) = add_agent_nets(b, 1, n_hidden)
    loss = _weighted_sqerr(b, q)
    return b.build(), loss


def _evaluate_loss(
    graph: Graph, loss: int, bindings: Mapping[str, Tensor], params: ParamStore
) -> LossResult:
    values = forward(graph, bindings)
    report = backward(graph, loss, bindings, values=values)
    residuals = bindings["y"][:, 0] - values[graph.probes["prediction"]][:, 0]
    grads = {
        name: np.array(report.params[name]) if name in report.params else np.zeros_like(value)
        for name, value in params.online.items()
    }
    return LossResult(report.loss, residuals, grads)


def _joint_bindings(batch: JointBatch, gamma: float, targets: Bootstrap) -> dict[str, Tensor]:
    if batch.size == 0:
        raise ReplayError("joint loss over an empty batch")
    return {
        "y": (batch.reward + gamma * targets.q_tot)[:, None],
        "w": np.full((batch.size, 1), 1.0 / batch.size),
        "state": batch.state,
    }


def mixer_loss(
    batch: JointBatch,
    params: ParamStore,
    gamma: float,
    targets: Bootstrap | None = None,
) -> LossResult:
    """Mean squared joint TD error with Q_i held fixed; only mixer gradients are non-zero."""
    targets = compute_targets(batch, params) if targets is None else targets
    bindings = _joint_bindings(batch, gamma, targets)
    inputs = batch.inputs(params.dims.n_actions).reshape(batch.size * batch.n_agents, -1)
    q_all = agent_q_values(params.agent(), inputs).reshape(batch.size, batch.n_agents, -1)
    q = np.take_along_axis(q_all, batch.actions[..., None], axis=-1)[..., 0]
    bindings.update({f"q.{i}": q[:, i : i + 1] for i in range(batch.n_agents)})
    bindings.update(params.mixer_params())
    graph, loss = mixer_loss_graph(params.mixer, batch.n_agents)
    return _evaluate_loss(graph, loss, bindings, params)


def joint_loss(
    batch: JointBatch,
    params: ParamStore,
    gamma: float,
    targets: Bootstrap | None = None,
) -> LossResult:
    """Mean squared joint TD error with gradients for both networks."""
    targets = compute_targets(batch, params) if targets is None else targets
    bindings = _joint_bindings(batch, gamma, targets)
    inputs = batch.inputs(params.dims.n_actions)
    for i in range(batch.n_agents):
        bindings[f"x.{i}"] = inputs[:, i, :]
        bindings[f"onehot.{i}"] = one_hot(batch.actions[:, i], params.dims.n_actions)
    bindings.update(params.online)
    graph, loss = joint_loss_graph(params.mixer, batch.n_agents, n_agent_layers(params.online))
    return _evaluate_loss(graph, loss, bindings, params)


def individual_loss(
    selected: Selection,
    params: ParamStore,
    gamma: float,
    *,
    scale: float = 1.0,
) -> LossResult:
    """sum_j w_j (r_j + gamma * Q~_j - Q_j)^2 over the selected transitions.

    ``scale`` multiplies every weight; only agent-network gradients are non-zero.
    """
    if len(selected) == 0:
        raise ReplayError("individual loss over an empty selection")
    chosen = selected.transitions()
    bindings: dict[str, Tensor] = {
        "x.0": chosen.inputs,
        "onehot.0": one_hot(chosen.actions, params.dims.n_actions),
        "y": (chosen.rewards + gamma * chosen.bootstrap)[:, None],
        "w": (scale * selected.weights)[:, None],
        **params.agent(),
    }
    graph, loss = individual_loss_graph(n_agent_layers(params.online))
    return _evaluate_loss(graph, loss, bindings, params)


# -- training state ------------------------------------------------------------


@dataclass
class UpdateMetrics:
    L_tot: float
    L_ind: float | None
    mean_abs_delta: float
    eta: float | None
    selected_count: int | None
    synced: bool


@dataclass
class TrainState:
    params: ParamStore
    buffer: ReplayBuffer
    rollout_rng: np.random.Generator
    sample_rng: np.random.Generator
    eval_rng: np.random.Generator
    agent_opt: Optimizer
    mixer_opt: Optimizer
    t_step: int = 0
    episodes: int = 0
    updates: int = 0
    last_sync_check: int = 0
    last_update: UpdateMetrics | None = None
    dump: ReplayDumpWriter | None = field(default=None, repr=False)


def net_dims(config: RunConfig, env: CoopEnv) -> NetDims:
    spec = env.spec()
    return NetDims(
        n_agents=spec.n_agents,
        n_actions=spec.n_actions,
        obs_dim=spec.obs_dim,
        state_dim=spec.state_dim,
        agent_hidden=tuple(config.train.agent_hidden),
        mixer_embed=config.train.mixer_embed,
    )


def init_state(config: RunConfig, env: CoopEnv, seed: int) -> TrainState:
    """Independent random streams for initialisation, rollouts, sampling and evaluation."""
    init_seq, rollout_seq, sample_seq, eval_seq = np.random.SeedSequence(seed).spawn(4)
    cfg = config.train
    params = init_params(int(init_seq.generate_state(1)[0]), net_dims(config, env), cfg.mixer)
    return TrainState(
        params=params,
        buffer=ReplayBuffer(cfg.buffer_capacity),
        rollout_rng=np.random.default_rng(rollout_seq),
        sample_rng=np.random.default_rng(sample_seq),
        eval_rng=np.random.default_rng(eval_seq),
        agent_opt=make_optimizer(cfg.optimizer, cfg.lr),
        mixer_opt=make_optimizer(cfg.optimizer, cfg.lr),
    )


def _apply(state: TrainState, optimizer: Optimizer, grads: Mapping[str, Tensor], clip: float) -> None:
    if not grads:
        return
    clipped = clip_grad_norm(grads, clip)
    state.params.update(optimizer.step(state.params.online, clipped))


def update_targets(params: ParamStore, period: int, t: int, previous_t: int | None = None) -> bool:
    """Hard-copy online parameters into the targets when a multiple of ``period`` is reached.

    With ``previous_t`` the copy happens when (previous_t, t] contains a
    multiple of ``period``; without it, when ``t`` itself is one.
    """
    if period < 1:
        raise ValueError("target update period must be at least 1")
    due = t % period == 0 if previous_t is None else t // period > previous_t // period
    if due:
        params.sync_targets()
    return due


def train_step(state: TrainState, config: RunConfig) -> UpdateMetrics:
    cfg = config.train
    params = state.params
    episodes = state.buffer.sample_joint_minibatch(cfg.batch_size, state.sample_rng)
    batch = JointBatch.from_episodes(episodes)
    targets = compute_targets(batch, params)

    if cfg.mode == "joint-baseline":
        joint = joint_loss(batch, params, cfg.gamma, targets)
        if cfg.mixer_update:
            _apply(state, state.mixer_opt, joint.group(params.mixer_names()), cfg.grad_clip)
        _apply(state, state.agent_opt, joint.group(params.agent_names()), cfg.grad_clip)
        metrics = UpdateMetrics(
            L_tot=joint.value,
            L_ind=None,
            mean_abs_delta=float(np.mean(np.abs(joint.residuals))),
            eta=None,
            selected_count=None,
            synced=False,
        )
    else:
        # with mixer_update off the loss is still measured for the metrics row
        if cfg.joint_mixer_update:
            mixed = joint_loss(batch, params, cfg.gamma, targets)
            if cfg.mixer_update:
                _apply(state, state.agent_opt, mixed.group(params.agent_names()), cfg.grad_clip)
        else:
            mixed = mixer_loss(batch, params, cfg.gamma, targets)
        if cfg.mixer_update:
            _apply(state, state.mixer_opt, mixed.group(params.mixer_names()), cfg.grad_clip)

        candidates = divide(batch, params, cfg.gamma, targets)
        if cfg.mode == "divide-only":
            eta = 1.0
            selection = select_all(candidates)
        else:
            eta = cfg.fixed_eta if cfg.fixed_eta is not None else sample_ratio(state.t_step, ratio_schedule(cfg))
            probs = priority_probs(candidates.td_errors, cfg.alpha, cfg.priority_eps)
            selection = select(candidates, eta, probs, state.sample_rng, beta=beta_at(state.t_step, cfg))
        scale = 1.0 / batch.size if cfg.normalize_individual_loss else 1.0
        individual = individual_loss(selection, params, cfg.gamma, scale=scale)
        _apply(state, state.agent_opt, individual.group(params.agent_names()), cfg.grad_clip)
        if state.dump is not None and state.updates % config.run.replay_dump_interval == 0:
            state.dump.write(selection)
        metrics = UpdateMetrics(
            L_tot=mixed.value,
            L_ind=individual.value,
            mean_abs_delta=float(np.mean(np.abs(candidates.td_errors))),
            eta=eta,
            selected_count=len(selection),
            synced=False,
        )

    metrics.synced = update_targets(params, cfg.target_update_period, state.t_step, state.last_sync_check)
    state.last_sync_check = state.t_step
    state.updates += 1
    state.last_update = metrics
    return metrics


# -- main loop -----------------------------------------------------------------


def _crossed(previous: int, current: int, interval: int) -> bool:
    return interval > 0 and current // interval > previous // interval


class DERTrainer:
    """Runs the training loop for one (config, seed) pair.

    ``sink`` receives one metrics row per collected episode that produced an
    update or an evaluation. With ``out_dir`` set, checkpoints and replay
    dumps are written there.
    """

    def __init__(self, config: RunConfig, seed: int, out_dir: str | Path | None = None) -> None:
        self.config = config
        self.seed = seed
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.env = make_env(config.env)
        self.eval_env = make_env(config.env)
        self.state = init_state(config, self.env, seed)

    def _checkpoint(self, name: str) -> None:
        if self.out_dir is not None:
            save_checkpoint(self.out_dir / name, self.state.params, self.state.t_step)

    def train(self, sink: MetricsSink) -> TrainState:
        cfg, run = self.config.train, self.config.run
        state = self.state
        if self.out_dir is not None and run.replay_dump_interval > 0 and cfg.mode != "joint-baseline":
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "replay_dump.csv").unlink(missing_ok=True)
            state.dump = ReplayDumpWriter(self.out_dir / "replay_dump.csv")
        logger.info(
            "training %s/%s on %s, seed %d, t_max %d",
            cfg.mode,
            cfg.mixer,
            self.config.env.name,
            self.seed,
            cfg.t_max,
        )
        try:
            while state.t_step < cfg.t_max:
                self._iteration(sink)
        finally:
            if state.dump is not None:
                state.dump.close()
                state.dump = None
        self._checkpoint("checkpoint.sqlite")
        logger.info("finished seed %d after %d episodes, %d updates", self.seed, state.episodes, state.updates)
        return state

    def _iteration(self, sink: MetricsSink) -> None:
        cfg, run, state = self.config.train, self.config.run, self.state
        epsilon = epsilon_at(state.t_step, cfg)
        episode = run_episode(self.env, state.params, epsilon, state.rollout_rng)
        previous = state.t_step
        state.buffer.push_episode(episode)
        state.episodes += 1
        state.t_step += len(episode)

        update: UpdateMetrics | None = None
        if len(state.buffer) >= cfg.batch_size:
            update = train_step(state, self.config)
            if state.updates % run.log_interval == 0:
                logger.info(
                    "t_step %d  L_tot %.4g  L_ind %s  |delta| %.4g  eps %.3f  eta %s",
                    state.t_step,
                    update.L_tot,
                    "-" if update.L_ind is None else f"{update.L_ind:.4g}",
                    update.mean_abs_delta,
                    epsilon,
                    "-" if update.eta is None else f"{update.eta:.3f}",
                )

        eval_return: float | None = None
        if _crossed(previous, state.t_step, self.config.eval.interval):
            eval_return = evaluate(state.params.snapshot(), self.eval_env, self.config.eval.episodes, state.eval_rng)
            logger.info("t_step %d  eval return %.4g", state.t_step, eval_return)

        if _crossed(previous, state.t_step, run.checkpoint_interval):
            self._checkpoint(f"checkpoints/t{state.t_step:08d}.sqlite")

        if update is None and eval_return is None:
            return
        last = state.last_update
        sink.append(
            MetricsRow(
                t_step=state.t_step,
                L_tot=None if last is None else last.L_tot,
                L_ind=None if last is None else last.L_ind,
                mean_abs_delta=None if last is None else last.mean_abs_delta,
                eta=None if update is None else update.eta,
                epsilon=epsilon,
                selected_count=None if update is None else update.selected_count,
                eval_return=eval_return,
            )
        )


def train(config: RunConfig, seed: int, sink: MetricsSink, out_dir: str | Path | None = None) -> TrainState:
    return DERTrainer(config, seed, out_dir).train(sink)
