"""Tabular Q-learning over layer codes.

The state is the full 5-integer code of the current layer (layer index
included), the action is the code of the next layer, and a trajectory is the
ordered code list of one block, ending in a terminal entry.  Values live in
dense per-state rows aligned with the enumerated action list of the next
position, which keeps greedy argmaxes and backup maxes cheap.

Terminal states never get a row, so the backup value past the end of a
trajectory reads zero.  Updates run backwards from the terminal transition,
using the shaped intermediate reward (final reward divided by trajectory
length) unless shaping is turned off for comparison studies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, NamedTuple

import numpy as np

from .codes import (
    INPUT_STATE,
    CodeSpaceLimits,
    LayerCode,
    OpType,
    enumerate_actions,
)

Trajectory = tuple[LayerCode, ...]

_POOL_OPS = (OpType.MAX_POOLING, OpType.AVERAGE_POOLING)


class EmptyReplayError(RuntimeError):
    """Replay memory was sampled while empty."""


class ActionTable(NamedTuple):
    """Cached per-position view of the enumerated actions."""

    actions: tuple[LayerCode, ...]
    index_of: dict[LayerCode, int]
    add_indices: np.ndarray
    add_pred1: np.ndarray
    add_pred2: np.ndarray
    pool_indices: np.ndarray


@lru_cache(maxsize=4096)
def action_table(position: int, limits: CodeSpaceLimits) -> ActionTable:
    actions = enumerate_actions(position, limits)
    ops = np.array([a.op_type for a in actions], dtype=np.int64)
    adds = np.flatnonzero(ops == OpType.ELEMENTAL_ADD)
    pools = np.flatnonzero((ops == OpType.MAX_POOLING)
                           | (ops == OpType.AVERAGE_POOLING))
    return ActionTable(
        actions,
        {a: i for i, a in enumerate(actions)},
        adds,
        np.array([actions[i].pred1 for i in adds], dtype=np.int64),
        np.array([actions[i].pred2 for i in adds], dtype=np.int64),
        pools,
    )


def next_multiple(code: LayerCode, multiples: list[int]) -> int:
    """Channel multiple of a new layer given the multiples of its inputs."""
    if code.op_type == OpType.CONVOLUTION:
        return 1
    if code.op_type == OpType.CONCAT:
        return multiples[code.pred1] + multiples[code.pred2]
    return multiples[code.pred1]


def legal_action_mask(table: ActionTable, limits: CodeSpaceLimits,
                      multiples: list[int], pooling_count: int) -> np.ndarray:
    """Mask out actions whose structure could not build.

    Adds joining unequal channel multiples are illegal; pooling actions are
    cut once the per-trajectory pooling budget (if any) is spent.
    """
    mask = np.ones(len(table.actions), dtype=bool)
    if len(table.add_indices):
        m = np.asarray(multiples)
        mask[table.add_indices] = m[table.add_pred1] == m[table.add_pred2]
    if (limits.max_pooling_layers is not None
            and pooling_count >= limits.max_pooling_layers
            and len(table.pool_indices)):
        mask[table.pool_indices] = False
    return mask


@dataclass(frozen=True)
class EpsilonSchedule:
    """Piecewise-constant exploration schedule, strictly decreasing."""

    steps: tuple[tuple[float, int], ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError("schedule must have at least one step")
        last = None
        for eps, count in self.steps:
            if not 0.0 <= eps <= 1.0:
                raise ValueError(f"epsilon {eps} outside [0, 1]")
            if count < 1:
                raise ValueError("iteration counts must be positive")
            if last is not None and eps >= last:
                raise ValueError("epsilons must be strictly decreasing")
            last = eps

    @property
    def total_iterations(self) -> int:
        return sum(count for _, count in self.steps)

    def epsilon_at(self, iteration: int) -> float:
        if iteration < 1 or iteration > self.total_iterations:
            raise ValueError(f"iteration {iteration} outside "
                             f"1..{self.total_iterations}")
        remaining = iteration
        for eps, count in self.steps:
            if remaining <= count:
                return eps
            remaining -= count
        raise AssertionError("unreachable")

    def iterations_at(self, epsilon: float) -> range:
        """The 1-based iteration range run at the given epsilon."""
        start = 1
        for eps, count in self.steps:
            if eps == epsilon:
                return range(start, start + count)
            start += count
        raise ValueError(f"epsilon {epsilon} not in schedule")


def epsilon_at(schedule: EpsilonSchedule, iteration: int) -> float:
    return schedule.epsilon_at(iteration)


DEFAULT_BLOCK_SCHEDULE = EpsilonSchedule((
    (1.0, 95), (0.9, 7), (0.8, 7), (0.7, 7), (0.6, 10),
    (0.5, 10), (0.4, 10), (0.3, 10), (0.2, 10), (0.1, 12),
))

# Only the 46-iteration total is fixed for connection search; the split
# keeps roughly the same explore/exploit proportions as the block schedule.
DEFAULT_CONNECTION_SCHEDULE = EpsilonSchedule((
    (1.0, 22), (0.9, 2), (0.8, 2), (0.7, 2), (0.6, 3),
    (0.5, 3), (0.4, 3), (0.3, 3), (0.2, 3), (0.1, 3),
))


class QTable:
    """Map from (state code, action code) to value; unseen pairs read zero."""

    def __init__(self, limits: CodeSpaceLimits, alpha: float = 0.01,
                 gamma: float = 1.0):
        if not 0.0 < alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if not 0.0 < gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        self.limits = limits
        self.alpha = alpha
        self.gamma = gamma
        self._rows: dict[LayerCode, np.ndarray] = {}

    def _table_for(self, state: LayerCode) -> ActionTable:
        return action_table(state.layer_index + 1, self.limits)

    def row(self, state: LayerCode) -> np.ndarray | None:
        return self._rows.get(state)

    def _ensure_row(self, state: LayerCode) -> np.ndarray:
        row = self._rows.get(state)
        if row is None:
            row = np.zeros(len(self._table_for(state).actions))
            self._rows[state] = row
        return row

    def q(self, state: LayerCode, action: LayerCode) -> float:
        row = self._rows.get(state)
        if row is None:
            return 0.0
        return float(row[self._table_for(state).index_of[action]])

    def set_q(self, state: LayerCode, action: LayerCode, value: float) -> None:
        if state.op_type == OpType.TERMINAL:
            raise ValueError("terminal states carry no values")
        self._ensure_row(state)[self._table_for(state).index_of[action]] = value

    def blend(self, state: LayerCode, action: LayerCode, target: float) -> None:
        """One update step: Q <- (1 - alpha) Q + alpha * target."""
        row = self._ensure_row(state)
        idx = self._table_for(state).index_of[action]
        row[idx] = (1.0 - self.alpha) * row[idx] + self.alpha * target

    def best_value(self, state: LayerCode, mask: np.ndarray) -> float:
        row = self._rows.get(state)
        if row is None:
            return 0.0
        return float(row[mask].max())

    def entries(self) -> Iterable[tuple[LayerCode, LayerCode, float]]:
        """Nonzero (state, action, value) triples, deterministic order."""
        for state in sorted(self._rows):
            row = self._rows[state]
            actions = self._table_for(state).actions
            for idx in np.flatnonzero(row):
                yield state, actions[idx], float(row[idx])

    @property
    def visited_states(self) -> int:
        return len(self._rows)

    def to_json(self) -> dict:
        from .codes import serialize_code
        entries = {}
        for state, action, value in self.entries():
            entries[serialize_code(state) + ";" + serialize_code(action)] = value
        return {"alpha": self.alpha, "gamma": self.gamma,
                "max_layer_index": self.limits.max_layer_index,
                "entries": entries}

    @classmethod
    def from_json(cls, payload: dict, limits: CodeSpaceLimits) -> "QTable":
        table = cls(limits, alpha=payload["alpha"], gamma=payload["gamma"])
        for key, value in payload["entries"].items():
            state_text, action_text = key.split(";")
            state = LayerCode(*(int(v) for v in state_text.split(",")))
            action = LayerCode(*(int(v) for v in action_text.split(",")))
            table.set_q(state, action, value)
        return table


def sample_trajectory(qtable: QTable, epsilon: float, limits: CodeSpaceLimits,
                      rng: np.random.Generator) -> Trajectory:
    """Epsilon-greedy rollout over masked legal actions.

    Greedy picks argmax over the state's row with uniform random tie-breaks;
    exploration picks uniformly among legal actions.  Termination happens at
    a terminal action or, at the latest, at ``max_layer_index``.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    codes: list[LayerCode] = []
    multiples = [1]
    pooling_count = 0
    state = INPUT_STATE
    for position in range(1, limits.max_layer_index + 1):
        table = action_table(position, limits)
        mask = legal_action_mask(table, limits, multiples, pooling_count)
        legal = np.flatnonzero(mask)
        if rng.random() < epsilon:
            pick = int(legal[rng.integers(len(legal))])
        else:
            row = qtable.row(state)
            if row is None:
                pick = int(legal[rng.integers(len(legal))])
            else:
                values = row[legal]
                ties = legal[values == values.max()]
                pick = int(ties[rng.integers(len(ties))]) if len(ties) > 1 \
                    else int(ties[0])
        code = table.actions[pick]
        codes.append(code)
        if code.op_type == OpType.TERMINAL:
            break
        multiples.append(next_multiple(code, multiples))
        if code.op_type in _POOL_OPS:
            pooling_count += 1
        state = code
    return tuple(codes)


def shaped_reward(final_reward: float, length: int) -> float:
    """Intermediate reward: the final reward spread evenly over the steps."""
    if length < 1:
        raise ValueError("trajectory length must be >= 1")
    return final_reward / length


def update_from_trajectory(qtable: QTable, trajectory: Trajectory,
                           final_reward: float, shaped: bool = True) -> QTable:
    """Apply the backward value updates for one evaluated trajectory.

    The state chain starts at the block-input pseudo-state (layer index 0)
    and then follows the trajectory's codes, so every decision including the
    very first layer choice is learned.  The transition into the terminal
    state is blended straight toward the final reward (terminal rows are
    never written, so values past the end read zero); every earlier
    transition blends toward ``r_t + gamma * max_a Q(next, a)``, applied
    backwards so each backup sees the fresher values downstream.  The max
    runs over the masked legal actions of the next state.  With
    ``shaped=False`` the intermediate reward is zero instead of
    ``final_reward / T`` — the slower baseline that shaping is compared
    against.
    """
    if not math.isfinite(final_reward):
        raise ValueError(f"non-finite reward {final_reward}")
    T = len(trajectory)
    if T == 0 or trajectory[-1].op_type != OpType.TERMINAL:
        raise ValueError("trajectory must end with a terminal code")
    chain = (INPUT_STATE,) + tuple(trajectory)
    try:
        qtable.blend(chain[-2], chain[-1], final_reward)
        r_t = shaped_reward(final_reward, T) if shaped else 0.0
        multiples = [1]
        pool_prefix = [0]
        for code in trajectory[:-1]:
            multiples.append(next_multiple(code, multiples))
            pool_prefix.append(pool_prefix[-1] + (code.op_type in _POOL_OPS))
        limits = qtable.limits
        for i in range(len(chain) - 3, -1, -1):
            next_state = chain[i + 1]
            position = next_state.layer_index + 1
            table = action_table(position, limits)
            mask = legal_action_mask(table, limits, multiples[:position],
                                     pool_prefix[position - 1])
            best = qtable.best_value(next_state, mask)
            qtable.blend(chain[i], next_state, r_t + qtable.gamma * best)
    except KeyError as exc:
        raise ValueError(f"illegal transition in trajectory: {exc}") from None
    return qtable


class ReplayMemory:
    """Bounded store of (trajectory, final reward) records.

    Sampling is uniform with replacement and driven by an owned seeded
    generator, so a fixed seed fixes the whole draw sequence.
    """

    def __init__(self, seed: int = 0, capacity: int | None = None):
        self._records: list[tuple[Trajectory, float]] = []
        self._rng = np.random.default_rng(seed)
        self.capacity = capacity

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> tuple[tuple[Trajectory, float], ...]:
        return tuple(self._records)

    def add(self, trajectory: Trajectory, final_reward: float) -> None:
        if not math.isfinite(final_reward):
            raise ValueError(f"non-finite reward {final_reward}")
        self._records.append((tuple(trajectory), final_reward))
        if self.capacity is not None and len(self._records) > self.capacity:
            del self._records[0]

    def sample(self, count: int) -> list[tuple[Trajectory, float]]:
        if not self._records:
            raise EmptyReplayError("replay memory is empty")
        picks = self._rng.integers(0, len(self._records), size=count)
        return [self._records[i] for i in picks]

    def state_dict(self) -> dict:
        from .codes import serialize_block
        return {"capacity": self.capacity,
                "records": [[serialize_block(codes), reward]
                            for codes, reward in self._records],
                "rng_state": self._rng.bit_generator.state}

    @classmethod
    def from_state_dict(cls, payload: dict) -> "ReplayMemory":
        from .codes import parse_block
        memory = cls(capacity=payload["capacity"])
        memory._records = [(parse_block(line), reward)
                           for line, reward in payload["records"]]
        memory._rng.bit_generator.state = payload["rng_state"]
        return memory


def replay_pass(qtable: QTable, memory: ReplayMemory, sample_count: int = 64,
                shaped: bool = True) -> QTable:
    """Draw ``sample_count`` records uniformly and apply each one's update."""
    for codes, reward in memory.sample(sample_count):
        update_from_trajectory(qtable, codes, reward, shaped=shaped)
    return qtable
