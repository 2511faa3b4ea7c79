"""Parameter-shared agent Q network, mixers and greedy target evaluation.

All agents evaluate one network whose input is the concatenation of the
agent's observation, a one-hot of its previous action and a one-hot of its
index. Mixers combine the chosen per-agent values into ``Q_tot``; the
monotonic mixer passes every hypernetwork weight applied to ``Q_i`` through
``abs`` so that ``dQ_tot/dQ_i >= 0`` everywhere.

Parameter names follow a ``<group>.<layer>.<kind>`` convention, e.g.
``agent.fc1.weight`` or ``mixer.hyper_w1.0.bias``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Mapping

import numpy as np
import numpy.typing as npt

from der import diffcore
from der.diffcore import Graph, GraphBuilder, Tensor
from der.errors import ShapeError

logger = logging.getLogger(__name__)

AgentNetParams = Mapping[str, Tensor]
MixerParams = Mapping[str, Tensor]


class MixerKind(str, Enum):
    VDN = "vdn"
    MONOTONIC = "monotonic"


@dataclass(frozen=True)
class NetDims:
    n_agents: int
    n_actions: int
    obs_dim: int
    state_dim: int
    agent_hidden: tuple[int, ...] = (64, 64)
    mixer_embed: int = 32

    def __post_init__(self) -> None:
        widths = (self.n_agents, self.n_actions, self.obs_dim, self.state_dim, self.mixer_embed)
        if min(widths) <= 0 or not self.agent_hidden or min(self.agent_hidden) <= 0:
            raise ShapeError(f"all network widths must be positive: {self}")

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.n_actions + self.n_agents


def agent_layer_shapes(dims: NetDims) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    fan_in = dims.input_dim
    for k, width in enumerate(dims.agent_hidden, start=1):
        shapes[f"agent.fc{k}.weight"] = (fan_in, width)
        shapes[f"agent.fc{k}.bias"] = (width,)
        fan_in = width
    shapes["agent.out.weight"] = (fan_in, dims.n_actions)
    shapes["agent.out.bias"] = (dims.n_actions,)
    return shapes


def mixer_layer_shapes(dims: NetDims, kind: MixerKind) -> dict[str, tuple[int, ...]]:
    if kind is MixerKind.VDN:
        return {}
    s, h = dims.state_dim, dims.mixer_embed
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(dims.n_agents):
        shapes[f"mixer.hyper_w1.{i}.weight"] = (s, h)
        shapes[f"mixer.hyper_w1.{i}.bias"] = (h,)
    shapes.update(
        {
            "mixer.hyper_b1.weight": (s, h),
            "mixer.hyper_b1.bias": (h,),
            "mixer.hyper_w2.weight": (s, h),
            "mixer.hyper_w2.bias": (h,),
            "mixer.hyper_v.0.weight": (s, h),
            "mixer.hyper_v.0.bias": (h,),
            "mixer.hyper_v.1.weight": (h, 1),
            "mixer.hyper_v.1.bias": (1,),
        }
    )
    return shapes


@dataclass
class ParamStore:
    """Online and target copies of the shared agent network and the mixer.

    Tensors are never mutated in place: updates replace entries with new
    arrays, so a dictionary handed out earlier stays a consistent snapshot.
    """

    dims: NetDims
    mixer: MixerKind
    online: dict[str, Tensor]
    target: dict[str, Tensor] = field(default_factory=dict)

    def agent(self, target: bool = False) -> dict[str, Tensor]:
        source = self.target if target else self.online
        return {k: v for k, v in source.items() if k.startswith("agent.")}

    def mixer_params(self, target: bool = False) -> dict[str, Tensor]:
        source = self.target if target else self.online
        return {k: v for k, v in source.items() if k.startswith("mixer.")}

    def agent_names(self) -> list[str]:
        return [k for k in self.online if k.startswith("agent.")]

    def mixer_names(self) -> list[str]:
        return [k for k in self.online if k.startswith("mixer.")]

    def update(self, new_values: Mapping[str, Tensor]) -> None:
        for name, value in new_values.items():
            if name not in self.online:
                raise KeyError(name)
            self.online[name] = _frozen(value)

    def sync_targets(self) -> None:
        self.target = dict(self.online)

    def snapshot(self) -> "ParamStore":
        return ParamStore(self.dims, self.mixer, dict(self.online), dict(self.target))


def _frozen(value: npt.ArrayLike) -> Tensor:
    arr = np.array(value, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def init_params(seed: int, dims: NetDims, kind: MixerKind | str = MixerKind.MONOTONIC) -> ParamStore:
    """Uniform(+-1/sqrt(fan_in)) initialisation; targets start equal to online."""
    kind = MixerKind(kind)
    rng = np.random.default_rng(seed)
    shapes = {**agent_layer_shapes(dims), **mixer_layer_shapes(dims, kind)}
    online: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        weight_name = name.rsplit(".", 1)[0] + ".weight"
        fan_in = shapes[weight_name][0]
        bound = 1.0 / np.sqrt(fan_in)
        online[name] = _frozen(rng.uniform(-bound, bound, size=shape))
    store = ParamStore(dims, kind, online)
    store.sync_targets()
    logger.debug("initialised %d tensors for %s mixer (seed %d)", len(online), kind.value, seed)
    return store


def n_agent_layers(params: Mapping[str, Tensor]) -> int:
    return sum(1 for k in params if k.startswith("agent.fc") and k.endswith(".weight"))


def n_mixer_agents(params: Mapping[str, Tensor]) -> int:
    return sum(1 for k in params if k.startswith("mixer.hyper_w1.") and k.endswith(".weight"))


# -- graph construction helpers ------------------------------------------------


def _agent_leaves(b: GraphBuilder, n_hidden: int) -> list[tuple[int, int]]:
    layers = [(b.param(f"agent.fc{k}.weight"), b.param(f"agent.fc{k}.bias")) for k in range(1, n_hidden + 1)]
    layers.append((b.param("agent.out.weight"), b.param("agent.out.bias")))
    return layers


def _apply_agent(b: GraphBuilder, x: int, layers: list[tuple[int, int]]) -> int:
    h = x
    for weight, bias in layers[:-1]:
        h = b.relu(b.linear(h, weight, bias))
    return b.linear(h, *layers[-1])


def add_agent_net(b: GraphBuilder, x: int, n_hidden: int) -> int:
    """Append the shared agent network to ``b``; returns the (M, |A|) Q node."""
    return _apply_agent(b, x, _agent_leaves(b, n_hidden))


def add_agent_nets(b: GraphBuilder, n_agents: int, n_hidden: int, prefix: str = "") -> list[int]:
    """One agent-network application per agent, all sharing the same leaves.

    Each agent ``i`` reads constants ``{prefix}x.{i}`` (inputs) and
    ``{prefix}onehot.{i}`` (chosen action); the chosen values are registered
    as probes ``{prefix}q.{i}``.
    """
    layers = _agent_leaves(b, n_hidden)
    chosen = []
    for i in range(n_agents):
        q_all = _apply_agent(b, b.const(f"{prefix}x.{i}"), layers)
        q = b.sum(b.mul(q_all, b.const(f"{prefix}onehot.{i}")), axis=1)
        chosen.append(b.probe(q, f"{prefix}q.{i}"))
    return chosen


def add_mixer(b: GraphBuilder, kind: MixerKind, qs: list[int], state: int | None) -> int:
    """Append a mixer over the (R, 1) nodes ``qs``; returns the (R, 1) Q_tot node."""
    if kind is MixerKind.VDN:
        total = qs[0]
        for q in qs[1:]:
            total = b.add(total, q)
        return total
    if state is None:
        raise ShapeError("the monotonic mixer needs a state input")
    hidden = b.linear(state, b.param("mixer.hyper_b1.weight"), b.param("mixer.hyper_b1.bias"))
    for i, q in enumerate(qs):
        w1 = b.abs(b.linear(state, b.param(f"mixer.hyper_w1.{i}.weight"), b.param(f"mixer.hyper_w1.{i}.bias")))
        hidden = b.add(hidden, b.mul(q, w1))
    hidden = b.elu(hidden)
    w2 = b.abs(b.linear(state, b.param("mixer.hyper_w2.weight"), b.param("mixer.hyper_w2.bias")))
    v = b.relu(b.linear(state, b.param("mixer.hyper_v.0.weight"), b.param("mixer.hyper_v.0.bias")))
    v = b.linear(v, b.param("mixer.hyper_v.1.weight"), b.param("mixer.hyper_v.1.bias"))
    return b.add(b.sum(b.mul(hidden, w2), axis=1), v)


@lru_cache(maxsize=None)
def agent_forward_graph(n_hidden: int) -> tuple[Graph, int]:
    b = GraphBuilder()
    q = add_agent_net(b, b.const("x"), n_hidden)
    return b.build(), q


@lru_cache(maxsize=None)
def mixer_graph(kind: MixerKind, n_agents: int) -> tuple[Graph, int]:
    """Mixer over constant Q_i inputs ``q.{i}`` (probed) and ``state``."""
    b = GraphBuilder()
    qs = [b.probe(b.const(f"q.{i}"), f"q.{i}") for i in range(n_agents)]
    state = b.const("state") if kind is MixerKind.MONOTONIC else None
    q_tot = add_mixer(b, kind, qs, state)
    total = b.sum(q_tot)
    b.probe(q_tot, "q_tot")
    return b.build(), total


# -- evaluation ------------------------------------------------------------------


def encode_inputs(obs: npt.ArrayLike, last_actions: npt.ArrayLike, n_actions: int) -> Tensor:
    """Build agent inputs from (..., N, obs) observations and (..., N) actions.

    A last action of -1 (the first step of an episode) encodes as all zeros.
    Returns an array of shape (..., N, obs + |A| + N).
    """
    obs = np.asarray(obs, dtype=np.float64)
    last = np.asarray(last_actions, dtype=np.int64)
    n_agents = obs.shape[-2]
    if last.shape != obs.shape[:-1]:
        raise ShapeError(f"last actions {last.shape} do not match observations {obs.shape}")
    action_hot = np.zeros(last.shape + (n_actions,))
    valid = last >= 0
    action_hot[valid, last[valid]] = 1.0
    ids = np.broadcast_to(np.eye(n_agents), obs.shape[:-2] + (n_agents, n_agents))
    return np.concatenate([obs, action_hot, ids], axis=-1)


def one_hot(indices: npt.ArrayLike, width: int) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros(idx.shape + (width,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def agent_q_values(params: AgentNetParams, inputs: npt.ArrayLike) -> Tensor:
    """Q-values for a batch of agent inputs of shape (M, input_dim)."""
    graph, q = agent_forward_graph(n_agent_layers(params))
    return diffcore.forward(graph, {**params, "x": np.atleast_2d(inputs)})[q]


def agent_q(
    params: AgentNetParams,
    obs: npt.ArrayLike,
    last_action_onehot: npt.ArrayLike,
    agent_id_onehot: npt.ArrayLike,
) -> Tensor:
    """Q-values of one agent for every action, shape (|A|,)."""
    x = np.concatenate(
        [np.ravel(obs), np.ravel(last_action_onehot), np.ravel(agent_id_onehot)]
    ).astype(np.float64)
    expected = params["agent.fc1.weight"].shape[0]
    if x.shape[0] != expected:
        raise ShapeError(f"agent input width {x.shape[0]} != network input width {expected}")
    return agent_q_values(params, x[None, :])[0]


@dataclass(frozen=True)
class QEval:
    """Mixer output for a batch: Q_tot (R,), chosen Q_i (R, N), dQ_tot/dQ_i (R, N)."""

    q_tot: Tensor
    q_chosen: Tensor
    grads_g: Tensor


def mix_batch(
    kind: MixerKind | str,
    mixer: MixerParams,
    q_chosen: npt.ArrayLike,
    states: npt.ArrayLike | None,
) -> QEval:
    kind = MixerKind(kind)
    q = np.atleast_2d(np.asarray(q_chosen, dtype=np.float64))
    n_agents = q.shape[1]
    if kind is MixerKind.MONOTONIC and n_mixer_agents(mixer) != n_agents:
        raise ShapeError(f"mixer built for {n_mixer_agents(mixer)} agents, got {n_agents} values")
    graph, total = mixer_graph(kind, n_agents)
    bindings: dict[str, npt.ArrayLike] = {f"q.{i}": q[:, i : i + 1] for i in range(n_agents)}
    if kind is MixerKind.MONOTONIC:
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        width = mixer["mixer.hyper_b1.weight"].shape[0]
        if s.shape != (q.shape[0], width):
            raise ShapeError(f"state shape {s.shape} does not match ({q.shape[0]}, {width})")
        bindings["state"] = s
        bindings.update(mixer)
    values = diffcore.forward(graph, bindings)
    # Rows are independent, so the gradient of sum(Q_tot) is dQ_tot/dQ_i per row.
    report = diffcore.backward(graph, total, bindings, values=values)
    grads = np.concatenate(
        [diffcore.probe_gradient(report, f"q.{i}") for i in range(n_agents)], axis=1
    )
    q_tot = values[graph.probes["q_tot"]][:, 0]
    return QEval(q_tot=q_tot, q_chosen=q, grads_g=grads)


def mix(kind: MixerKind | str, mixer: MixerParams, q_chosen: npt.ArrayLike, state: npt.ArrayLike | None) -> QEval:
    """Mix one length-N vector of chosen values under one state."""
    q = np.asarray(q_chosen, dtype=np.float64).reshape(1, -1)
    s = None if state is None else np.asarray(state, dtype=np.float64).reshape(1, -1)
    out = mix_batch(kind, mixer, q, s)
    return QEval(q_tot=out.q_tot[0], q_chosen=out.q_chosen[0], grads_g=out.grads_g[0])


@dataclass(frozen=True)
class GreedyTarget:
    """Target-network greedy values: Q~_tot (R,), Q~_i (R, N), argmax actions (R, N)."""

    q_tot: Tensor
    per_agent: Tensor
    actions: Tensor


def greedy_targets(store: ParamStore, next_inputs: npt.ArrayLike, next_states: npt.ArrayLike | None) -> GreedyTarget:
    """Per-agent argmax under the target network fed into the target mixer.

    ``next_inputs`` has shape (R, N, input_dim). Ties resolve to the lowest
    action index (numpy argmax semantics). No gradients are taken.
    """
    x = np.asarray(next_inputs, dtype=np.float64)
    rows, n_agents, width = x.shape
    q = agent_q_values(store.agent(target=True), x.reshape(rows * n_agents, width))
    q = q.reshape(rows, n_agents, -1)
    actions = np.argmax(q, axis=-1)
    best = np.take_along_axis(q, actions[..., None], axis=-1)[..., 0]
    mixed = mix_batch(store.mixer, store.mixer_params(target=True), best, next_states)
    return GreedyTarget(q_tot=mixed.q_tot, per_agent=best, actions=actions)


def greedy_joint_target(
    store: ParamStore,
    next_obs: npt.ArrayLike,
    next_last_actions: npt.ArrayLike,
    next_state: npt.ArrayLike | None,
) -> float:
    """Q~_tot for a single next step given (N, obs) observations."""
    inputs = encode_inputs(next_obs, next_last_actions, store.dims.n_actions)
    state = None if next_state is None else np.asarray(next_state, dtype=np.float64)[None, :]
    return float(greedy_targets(store, inputs[None], state).q_tot[0])
