"""Multi-step classification MDP and TD(0) Deep-Q training.

Each episode samples one training volume and makes five predictions on it.
The state is (volume, pred_corr) where pred_corr says whether the previous
prediction was right; it starts at 0. A correct prediction earns +1 and sets
pred_corr to 1, a wrong one earns -1 and sets it to 0.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Iterator, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .errors import BufferNotReady, DivergenceError
from .models import DqnNetwork
from .phantom import Split

log = logging.getLogger(__name__)

METRICS_HEADER = ("episode", "epsilon", "mean_train_reward", "test_accuracy")


class Action(IntEnum):
    PREDICT_NORMAL = 0
    PREDICT_TUMOR = 1


@dataclass(frozen=True)
class State:
    image_index: int
    pred_corr: int = 0

    def __post_init__(self):
        if self.pred_corr not in (0, 1):
            raise ValueError(f"pred_corr must be 0 or 1, got {self.pred_corr}")


@dataclass(frozen=True)
class Transition:
    pred_corr_prev: int
    image_index: int
    action: int
    reward: int
    pred_corr_new: int
    terminal: bool = False

    def __post_init__(self):
        if self.reward != 2 * self.pred_corr_new - 1:
            raise ValueError(f"reward {self.reward} inconsistent with pred_corr {self.pred_corr_new}")


@dataclass(frozen=True)
class QLearningSpec:
    gamma: float = 0.99
    steps_per_episode: int = 5
    episodes: int = 145
    batch: int = 24
    test_every: int = 10
    lr: float = 1e-4
    buffer_capacity: int = 15000

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")


@dataclass
class EpsilonSchedule:
    """Linear decay ``max(eps0 - k * delta, eps_min)``, one tick per env step."""

    eps0: float = 0.7
    delta: float = 1e-4
    eps_min: float = 1e-4
    k: int = 0

    @property
    def value(self) -> float:
        return epsilon_value(self, self.k)

    def decay(self) -> None:
        self.k += 1


def epsilon_value(schedule: EpsilonSchedule, k: int) -> float:
    if k < 0:
        raise ValueError("decay step must be non-negative")
    return max(schedule.eps0 - k * schedule.delta, schedule.eps_min)


def env_step(label: int, action: int) -> tuple[int, int]:
    """Reward and new pred_corr: the Kronecker delta of action and label."""
    pred_corr = int(action == label)
    return (1 if pred_corr else -1), pred_corr


def select_action(q: Sequence[float], epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; the greedy branch breaks ties toward action 0."""
    if rng.random() < epsilon:
        return int(rng.integers(2))
    return int(np.argmax(q))


class ReplayBuffer:
    def __init__(self, capacity: int = 15000):
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Transition]:
        return iter(self._items)

    def push(self, t: Transition) -> None:
        self._items.append(t)

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        if len(self._items) < n:
            raise BufferNotReady(f"buffer holds {len(self._items)} transitions, batch needs {n}")
        idx = rng.choice(len(self._items), size=n, replace=False)
        return [self._items[i] for i in idx]


def buffer_push(buffer: ReplayBuffer, t: Transition) -> None:
    buffer.push(t)


def buffer_sample(buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> list[Transition]:
    return buffer.sample(n, rng)


class QFunction(Protocol):
    def q_values(self, volumes, pred_corr) -> np.ndarray: ...


def td_target_value(reward: float, terminal: bool, next_q: Sequence[float], gamma: float) -> float:
    """``r`` at the end of an episode, else ``r + gamma * max_a Q(s', a)``."""
    if terminal:
        return float(reward)
    return float(reward + gamma * max(next_q))


def td_targets(batch: Sequence[Transition], net: QFunction, spec: QLearningSpec,
               volumes: np.ndarray) -> np.ndarray:
    """Targets for a batch; s' is the same volume with the new pred_corr.

    Bootstraps from the live network (there is no separate target copy).
    """
    idx = np.array([t.image_index for t in batch])
    if idx.size and (idx.min() < 0 or idx.max() >= len(volumes)):
        raise IndexError(f"image index out of range for {len(volumes)} volumes")
    live = [i for i, t in enumerate(batch) if not t.terminal]
    next_q = np.zeros((len(batch), 2))
    if live:
        next_q[live] = net.q_values(volumes[idx[live]], [batch[i].pred_corr_new for i in live])
    return np.array([td_target_value(t.reward, t.terminal, next_q[i], spec.gamma)
                     for i, t in enumerate(batch)])


def td_target(t: Transition, net: QFunction, spec: QLearningSpec, volumes: np.ndarray) -> float:
    return float(td_targets([t], net, spec, volumes)[0])


def learn_step(net: DqnNetwork, buffer: ReplayBuffer, spec: QLearningSpec, volumes: np.ndarray,
               opt: ad.AdamState, rng: np.random.Generator) -> float | None:
    """One masked-MSE Adam update on a random batch; None if the buffer is short."""
    if len(buffer) < spec.batch:
        return None
    batch = buffer.sample(spec.batch, rng)
    targets = td_targets(batch, net, spec, volumes)
    net.zero_grad()
    q = net.forward(volumes[[t.image_index for t in batch]], [t.pred_corr_prev for t in batch])
    loss = ad.masked_mse_loss(q, [t.action for t in batch], targets)
    if not np.isfinite(loss.item()):
        raise DivergenceError(f"non-finite TD loss {loss.item()}")
    loss.backward()
    ad.adam_step(net.params, opt)
    return loss.item()


@dataclass
class EpisodeLog:
    image_index: int
    transitions: list[Transition]
    losses: list[float] = field(default_factory=list)

    @property
    def rewards(self) -> list[int]:
        return [t.reward for t in self.transitions]

    @property
    def total_reward(self) -> int:
        return sum(self.rewards)


def run_episode(net: QFunction, train: Split, schedule: EpsilonSchedule, spec: QLearningSpec,
                buffer: ReplayBuffer, rng: np.random.Generator, opt: ad.AdamState | None = None,
                learn: bool = True) -> EpisodeLog:
    """Play one episode on a uniformly drawn training volume.

    After every step, once the buffer holds a full batch, one update is made
    (skipped when ``learn`` is false). Epsilon ticks once per step.
    """
    if len(train) == 0:
        raise ValueError("training split is empty")
    idx = int(rng.integers(len(train)))
    label = int(train.labels[idx])
    pc = 0
    episode = EpisodeLog(idx, [])
    for step in range(spec.steps_per_episode):
        q = net.q_values(train.volumes[idx:idx + 1], [pc])[0]
        action = select_action(q, schedule.value, rng)
        reward, pc_new = env_step(label, action)
        t = Transition(pc, idx, action, reward, pc_new, terminal=step == spec.steps_per_episode - 1)
        buffer.push(t)
        episode.transitions.append(t)
        pc = pc_new
        if learn:
            loss = learn_step(net, buffer, spec, train.volumes, opt, rng)  # type: ignore[arg-type]
            if loss is not None:
                episode.losses.append(loss)
        schedule.decay()
    return episode


@dataclass
class EvalResult:
    ids: list[str]
    labels: np.ndarray
    predictions: np.ndarray

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.predictions == self.labels)) if len(self.ids) else float("nan")


def evaluate_testset(net: QFunction, split: Split, chunk: int = 32) -> EvalResult:
    """One greedy step per volume from pred_corr = 0; touches no training state."""
    if len(split) == 0:
        raise ValueError("test split is empty")
    preds = []
    for lo in range(0, len(split), chunk):
        vols = split.volumes[lo:lo + chunk]
        q = net.q_values(vols, np.zeros(len(vols)))
        preds.append(np.argmax(q, axis=1))
    return EvalResult(list(split.ids), split.labels.copy(), np.concatenate(preds).astype(np.int64))


@dataclass
class MetricsRow:
    episode: int
    epsilon: float
    mean_train_reward: float
    test_accuracy: float | None = None


@dataclass
class RLResult:
    net: DqnNetwork
    metrics: list[MetricsRow]
    final_eval: EvalResult | None
    buffer: ReplayBuffer
    schedule: EpsilonSchedule

    def evaluation_rows(self) -> list[MetricsRow]:
        return [m for m in self.metrics if m.test_accuracy is not None]


def train_rl(train: Split, test: Split | None, spec: QLearningSpec = QLearningSpec(), seed: int = 0,
             net: DqnNetwork | None = None,
             on_episode: Callable[[MetricsRow], None] | None = None) -> RLResult:
    """Run ``spec.episodes`` episodes, evaluating every ``test_every`` and after the last."""
    if len(train) == 0:
        raise ValueError("training split is empty")
    rng = np.random.default_rng(seed)
    if net is None:
        net = DqnNetwork(train.volumes.shape[1:], seed=seed)
    opt = ad.AdamState(lr=spec.lr)
    buffer = ReplayBuffer(spec.buffer_capacity)
    schedule = EpsilonSchedule()
    metrics: list[MetricsRow] = []
    final = None
    for ep in range(1, spec.episodes + 1):
        episode = run_episode(net, train, schedule, spec, buffer, rng, opt)
        row = MetricsRow(ep, schedule.value, episode.total_reward / spec.steps_per_episode)
        if test is not None and len(test) and (ep % spec.test_every == 0 or ep == spec.episodes):
            final = evaluate_testset(net, test)
            row.test_accuracy = final.accuracy
            log.info("episode %d  eps %.4f  test accuracy %.4f", ep, row.epsilon, final.accuracy)
        metrics.append(row)
        if on_episode is not None:
            on_episode(row)
    return RLResult(net, metrics, final, buffer, schedule)


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        acc = "" if r.test_accuracy is None else repr(r.test_accuracy)
        w.writerow([r.episode, repr(r.epsilon), repr(r.mean_train_reward), acc])
    return buf.getvalue()


def write_metrics_csv(rows: Sequence[MetricsRow], path: str | Path) -> None:
    Path(path).write_text(metrics_csv(rows))


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: expected header {','.join(METRICS_HEADER)}")
        return [MetricsRow(int(r["episode"]), float(r["epsilon"]), float(r["mean_train_reward"]),
                           float(r["test_accuracy"]) if r["test_accuracy"] else None) for r in reader]


# tabular reference ----------------------------------------------------------

def tabular_q_learning(gamma: float = 0.99, lr: float = 0.1, sweeps: int = 10_000,
                       steps: int = 5, label: int = 1, tol: float | None = None) -> tuple[np.ndarray, int]:
    """Table-based TD(0) on the episodic MDP, keyed by (step, pred_corr, action).

    Each sweep updates every table entry once, in step order, using
    :func:`env_step` and :func:`td_target_value`. Returns the table and the
    number of sweeps run; stops early once a sweep moves no entry by more
    than ``tol``.
    """
    q = np.zeros((steps, 2, 2))
    for sweep in range(1, sweeps + 1):
        biggest = 0.0
        for k in range(steps):
            for pc in (0, 1):
                for a in (0, 1):
                    r, pc_new = env_step(label, a)
                    terminal = k == steps - 1
                    nxt = q[k + 1, pc_new] if not terminal else (0.0, 0.0)
                    target = td_target_value(r, terminal, nxt, gamma)
                    step_ = lr * (target - q[k, pc, a])
                    q[k, pc, a] += step_
                    biggest = max(biggest, abs(step_))
        if tol is not None and biggest < tol:
            return q, sweep
    return q, sweeps
