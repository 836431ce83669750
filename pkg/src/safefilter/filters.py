"""The unified safety-filter abstraction: monitor, fallback, intervention.

A monitor maps (information state, candidate control) to a real number whose
nonnegativity certifies that the paired fallback can maintain robust all-time
safety after the control is applied. A filter passes candidate controls whose
monitor check succeeds and otherwise intervenes. The brute-force soundness
oracle below checks the monitor contract exhaustively on small instances.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import MarginFunction, SystemModel, step
from .reachability import (
    ValueGrid,
    optimal_safety_policy,
    worst_case_next_value,
)


class DeploymentRejected(RuntimeError):
    """The initial state failed the monitor's deployment certificate."""


class BudgetExceededError(RuntimeError):
    """An exhaustive check would exceed its combinatorial node budget."""


@dataclass(frozen=True)
class Monitor:
    """Wrapper around an (information state, control) -> real evaluation."""

    evaluate: Callable[[np.ndarray, np.ndarray], float]
    name: str = ""

    def __call__(self, eta, u) -> float:
        return float(self.evaluate(eta, u))


@dataclass(frozen=True)
class FilterDecision:
    """Audit record of one filtering event.

    ``monitor_value`` is the monitor evaluated on the candidate control,
    logged before intervention. ``degraded`` marks interventions that had to
    fall back beyond their nominal construction (e.g. an infeasible QP).
    """

    candidate: np.ndarray
    applied: np.ndarray
    monitor_value: float
    overridden: bool
    degraded: bool = False


class SafetyFilter:
    """Monitor + fallback policy + intervention scheme.

    Immutable after construction apart from per-episode bookkeeping
    (``last_degraded`` and any state handled by ``reset``/``observe``), which
    follows a single-writer-per-episode contract.
    """

    def __init__(
        self,
        monitor: Monitor,
        fallback: Callable[[np.ndarray], np.ndarray],
        intervene: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
        name: str = "",
    ):
        self.monitor = monitor
        self.fallback = fallback
        self._intervene = intervene
        self.name = name
        self.last_degraded = False

    def intervene(self, eta, u) -> np.ndarray:
        self.last_degraded = False
        return self._intervene(eta, u)

    def reset(self, x0=None) -> None:
        """Clear per-episode state; called once before each episode."""
        self.last_degraded = False

    def observe(self, x) -> None:
        """Feed the current state to filters that maintain an information state."""


def least_restrictive_filter(
    model: SystemModel,
    grid: ValueGrid,
    u_candidates: Sequence[np.ndarray],
    d_candidates: Sequence[np.ndarray],
) -> SafetyFilter:
    """Switch filter on the solved value function.

    The monitor is the worst-case (over disturbance candidates) next-state
    value; candidates are passed through unchanged whenever it is nonnegative
    and otherwise replaced by the optimal safety policy.
    """
    if grid.domain.dim != model.state_dim:
        raise ValueError("grid dimension does not match model state dimension")
    if not len(u_candidates) or not len(d_candidates):
        raise ValueError("candidate lists must be nonempty")
    d_candidates = [np.atleast_1d(np.asarray(d, dtype=np.float64)) for d in d_candidates]
    fallback = optimal_safety_policy(model, grid, u_candidates, d_candidates)
    last = {}

    def evaluate(x, u):
        # decide() evaluates the monitor and then intervenes on the same
        # (x, u) pair, so cache the last query
        key = (np.asarray(x, dtype=np.float64).tobytes(),
               np.atleast_1d(np.asarray(u, dtype=np.float64)).tobytes())
        if last.get("key") != key:
            last["key"] = key
            last["value"] = worst_case_next_value(model, grid, x, u, d_candidates)
        return last["value"]

    monitor = Monitor(evaluate, name="worst_case_next_value")

    flt = SafetyFilter(monitor, fallback, name="least_restrictive")

    def intervene(x, u):
        flt.last_degraded = False
        if monitor(x, u) >= 0.0:
            return u
        return fallback(x)

    flt._intervene = intervene
    return flt


def passthrough_filter(model: SystemModel, name: str = "passthrough") -> SafetyFilter:
    """Identity intervention with a vacuous monitor; the unfiltered baseline."""
    u_rest = model.control_set.center

    monitor = Monitor(lambda x, u: 0.0, name="vacuous")
    flt = SafetyFilter(monitor, lambda x: u_rest.copy(), name=name)

    def intervene(x, u):
        flt.last_degraded = False
        return u

    flt._intervene = intervene
    return flt


def decide(flt: SafetyFilter, x, u_task) -> FilterDecision:
    """Evaluate the monitor on the candidate, intervene, and record the event."""
    x = np.asarray(x, dtype=np.float64)
    u_task = np.atleast_1d(np.asarray(u_task, dtype=np.float64))
    monitor_value = flt.monitor(x, u_task)
    applied = np.atleast_1d(np.asarray(flt.intervene(x, u_task), dtype=np.float64))
    return FilterDecision(
        candidate=u_task,
        applied=applied,
        monitor_value=monitor_value,
        overridden=not np.array_equal(applied, u_task),
        degraded=bool(flt.last_degraded),
    )


def filtered_step(
    model: SystemModel,
    flt: SafetyFilter,
    task_policy: Callable[[np.ndarray], np.ndarray],
    x,
    d,
) -> tuple[np.ndarray, FilterDecision]:
    """Run one closed-loop cycle: task proposal, filtering, plant step."""
    x = np.asarray(x, dtype=np.float64)
    decision = decide(flt, x, task_policy(x))
    return step(model, x, decision.applied, d), decision


@dataclass
class SoundnessReport:
    """Result of the exhaustive fallback-rollout monitor check."""

    checked_states: int
    certified_states: int
    nodes_expanded: int = 0
    counterexamples: list = field(default_factory=list)

    @property
    def sound(self) -> bool:
        return not self.counterexamples


def verify_monitor_soundness(
    model: SystemModel,
    flt: SafetyFilter,
    initial_states: Sequence[np.ndarray],
    horizon: int,
    d_candidates: Sequence[np.ndarray],
    failure_margin: MarginFunction,
    budget: int = 2_000_000,
) -> SoundnessReport:
    """Brute-force check of the monitor contract on a small instance.

    For every initial state whose fallback passes the monitor, roll out the
    fallback policy under *all* disturbance-candidate sequences up to the
    horizon and confirm the failure margin never goes negative. Each
    counterexample records (initial state, disturbance sequence, failing
    state). Raises BudgetExceededError before expanding more nodes than the
    budget allows.
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    d_candidates = [np.atleast_1d(np.asarray(d, dtype=np.float64)) for d in d_candidates]
    if not d_candidates:
        raise ValueError("need at least one disturbance candidate")
    branching = len(d_candidates)
    if branching == 1:
        per_state = horizon + 1
    else:
        per_state = (branching ** (horizon + 1) - 1) // (branching - 1)
    n_states = len(initial_states)
    if per_state * n_states > budget:
        raise BudgetExceededError(
            f"{per_state * n_states} rollout nodes exceed budget {budget}; "
            "reduce the horizon or the disturbance lattice"
        )

    report = SoundnessReport(checked_states=n_states, certified_states=0)
    for x0 in initial_states:
        x0 = np.asarray(x0, dtype=np.float64)
        if flt.monitor(x0, flt.fallback(x0)) < 0.0:
            continue
        report.certified_states += 1
        stack = [(x0, ())]
        while stack:
            x, d_seq = stack.pop()
            report.nodes_expanded += 1
            if float(failure_margin(x)) < 0.0:
                report.counterexamples.append((x0, d_seq, x))
                continue
            if len(d_seq) == horizon:
                continue
            u = flt.fallback(x)
            for i, d in enumerate(d_candidates):
                stack.append((model.step(x, u, d), d_seq + (i,)))
    return report
