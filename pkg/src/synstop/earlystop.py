"""Proxy-validation accuracy, relative improvement and the patience stopping rule.

The rule is available twice: :func:`monitor_update` is the incremental state
machine the server runs round by round, :func:`scan_stop_round` re-derives the
stop round from a whole accuracy trace via the windowed relative-improvement
condition. The two must agree on every trace.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ContractError, ModelParams, predict

EXACT_MATCH = "exact_match"
PER_LABEL = "per_label"
METRIC_MODES = (EXACT_MATCH, PER_LABEL)


def accuracy(params: ModelParams, features: np.ndarray, labels: np.ndarray, mode: str = EXACT_MATCH) -> float:
    if len(features) == 0:
        raise ContractError("cannot evaluate on an empty set")
    hits = predict(params, features) == labels
    if mode == EXACT_MATCH:
        return int(np.count_nonzero(hits.all(axis=1))) / len(features)
    if mode == PER_LABEL:
        return float(np.mean(hits.mean(axis=1)))
    raise ContractError(f"unknown metric mode {mode!r}")


def evaluate(proxy, params: ModelParams, mode: str = EXACT_MATCH) -> float:
    """Fraction of proxy examples predicted correctly.

    ``exact_match`` counts an example only if the full label vector matches;
    ``per_label`` averages per-label agreement instead.
    """
    return accuracy(params, proxy.features, proxy.labels, mode)


def relative_improvement(v: float, v_next: float) -> float:
    """``(v_next - v) / v`` with the zero-baseline guard.

    From ``v == 0`` any gain returns the sentinel 1.0 and no change returns 0.0,
    so the sign always matches ``v_next - v``.
    """
    if not (0.0 <= v <= 1.0 and 0.0 <= v_next <= 1.0):
        raise ContractError(f"accuracies must lie in [0, 1], got {v}, {v_next}")
    if v == 0.0:
        return 1.0 if v_next > 0.0 else 0.0
    return (v_next - v) / v


class Decision(enum.Enum):
    CONTINUE = "continue"
    STOP = "stop"


@dataclass(frozen=True, slots=True)
class MonitorState:
    patience: int
    last_value: float
    kappa: int = 0
    rounds_seen: int = 0
    stopped_at: int | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ContractError("patience must be a positive integer")
        if not 0 <= self.kappa <= self.patience:
            raise ContractError(f"kappa {self.kappa} outside [0, {self.patience}]")

    @classmethod
    def start(cls, patience: int, initial_value: float) -> "MonitorState":
        """State after evaluating the randomly initialised model (round 0)."""
        return cls(patience=patience, last_value=initial_value)

    @property
    def stopped(self) -> bool:
        return self.stopped_at is not None


def monitor_update(state: MonitorState, round_completed: int, v_next: float) -> tuple[MonitorState, Decision]:
    """Feed the accuracy of the model produced by round ``round_completed``."""
    if state.stopped:
        raise ContractError(f"monitor already stopped at round {state.stopped_at}")
    if round_completed != state.rounds_seen:
        raise ContractError(f"expected round {state.rounds_seen}, got {round_completed}")
    kappa = state.kappa + 1 if v_next <= state.last_value else 0
    seen = round_completed + 1
    if seen >= state.patience and kappa == state.patience:
        return MonitorState(state.patience, state.last_value, kappa, seen, seen), Decision.STOP
    return MonitorState(state.patience, v_next, kappa, seen), Decision.CONTINUE


def run_monitor(trace: Sequence[float], patience: int) -> int | None:
    """Replay a full trace (index 0 = initial model) through the monitor."""
    if len(trace) == 0:
        return None
    state = MonitorState.start(patience, trace[0])
    for r, v in enumerate(trace[1:]):
        state, decision = monitor_update(state, r, v)
        if decision is Decision.STOP:
            return state.stopped_at
    return None


def scan_stop_round(trace: Sequence[float], patience: int) -> int | None:
    """Smallest ``r >= p`` whose last ``p`` relative improvements are all <= 0."""
    if patience < 1:
        raise ContractError("patience must be a positive integer")
    # deltas[j - 1] is the improvement from round j - 1 to round j
    deltas = [relative_improvement(a, b) for a, b in zip(trace, trace[1:])]
    for r in range(patience, len(trace)):
        if max(deltas[r - patience:r]) <= 0:
            return r
    return None


def oracle_best_round(test_trace: Sequence[float]) -> int:
    """Round of maximum test accuracy, earliest on ties."""
    if len(test_trace) == 0:
        raise ContractError("empty trace has no best round")
    return int(np.argmax(np.asarray(test_trace, dtype=np.float64)))


def write_trace_csv(trace: Sequence[float], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "value"])
        for r, v in enumerate(trace):
            w.writerow([r, format(float(v), ".17g")])


def read_trace_csv(path: str | Path, column: str = "value") -> list[float]:
    """Read a trace; rows must be consecutive rounds starting at 0."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    values = []
    for expected, row in enumerate(rows):
        if int(row["round"]) != expected:
            raise ContractError(f"{path}: round {row['round']} out of sequence")
        values.append(float(row[column]))
    return values
