"""Episode interface over the solver for training damping agents.

One episode is one solve: ``reset`` seeds the state on a problem, each
``step`` runs a single damped iteration with the agent's lambda and returns
the usual (observation, reward, done, info) bundle. Reaching the iteration
cap terminates without the convergence bonus but is flagged as a timeout so
learners may still bootstrap through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .policy import STATE_CLIP, PolicyObservation, make_state, observe
from .scene import BAProblem
from .solver import (
    OUTCOME_CONVERGED,
    OUTCOME_ITERATION_CAP,
    OUTCOME_NUMERICAL_FAILURE,
    IterationRecord,
    SolverState,
    convergence_check,
    lm_iterate,
)

REWARD_VARIANTS = ("duration", "constant", "reduction", "reversed")


class EpisodeDoneError(RuntimeError):
    """step() was called on a finished episode; call reset() first."""


@dataclass
class EnvConfig:
    reward_variant: str = "duration"
    convergence_bonus: float = 10.0
    reduction_rate: float = 0.01
    window: int = 5
    max_iterations: int = 100
    threshold: float = 1e-6
    deterministic_time: bool = False

    def __post_init__(self) -> None:
        if self.reward_variant not in REWARD_VARIANTS:
            raise ValueError(
                f"reward_variant must be one of {REWARD_VARIANTS}, got {self.reward_variant!r}"
            )
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass
class StepOutcome:
    observation: PolicyObservation
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


def compute_reward(
    duration_s: float,
    converged: bool,
    iteration: int,
    variant: str,
    bonus: float = 10.0,
    reduction_rate: float = 0.01,
    error: float = float("nan"),
) -> float:
    """Per-step reward for each variant; the bonus replaces the step penalty.

    ``reduction`` pays nothing per step and a decayed bonus on convergence;
    ``reversed`` pays the negated estimation error (roles of state and reward
    swapped), keeping the plain bonus on convergence.
    """
    if variant == "duration":
        return bonus if converged else -duration_s
    if variant == "constant":
        return bonus if converged else -1.0
    if variant == "reduction":
        return bonus * (1.0 - reduction_rate) ** iteration if converged else 0.0
    if variant == "reversed":
        return bonus if converged else -error
    raise ValueError(f"unknown reward variant {variant!r}")


def make_reversed_state(durations, window: int) -> np.ndarray:
    """State for the reversed variant: negated durations, padded like make_state."""
    values = [-d for d in durations] if len(durations) else [0.0]
    recent = values[-window:]
    padded = [recent[0]] * (window - len(recent)) + recent
    return np.minimum(np.asarray(padded, dtype=float), STATE_CLIP)


class BAEnv:
    """Gym-style environment; the action is the damping for one iteration."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self._problem: BAProblem | None = None
        self._state: SolverState | None = None
        self._last_lambda = 0.0
        self._done = True
        self._trace: list[tuple[IterationRecord, float]] = []

    @property
    def solver_state(self) -> SolverState:
        if self._state is None:
            raise RuntimeError("environment has not been reset")
        return self._state

    @property
    def problem(self) -> BAProblem:
        if self._problem is None:
            raise RuntimeError("environment has not been reset")
        return self._problem

    def _observation(self) -> PolicyObservation:
        obs = observe(self._state, self.config.window, self._last_lambda)
        if self.config.reward_variant == "reversed":
            obs.state_vector = make_reversed_state(self._state.durations, self.config.window)
        return obs

    def reset(self, problem: BAProblem) -> PolicyObservation:
        self._problem = problem
        self._state = SolverState.initial(problem)
        self._last_lambda = 0.0
        self._done = False
        self._trace = []
        return self._observation()

    def step(self, lam: float) -> StepOutcome:
        if self._done:
            raise EpisodeDoneError("episode is finished; call reset")
        state, record = lm_iterate(
            self._problem,
            self._state,
            float(lam),
            deterministic_time=self.config.deterministic_time,
        )
        self._state = state
        self._last_lambda = float(lam)

        if state.failed:
            converged = False
            outcome = OUTCOME_NUMERICAL_FAILURE
        else:
            converged = convergence_check(state.error_history, self.config.threshold)
            outcome = OUTCOME_CONVERGED if converged else None
        capped = outcome is None and state.iteration >= self.config.max_iterations
        if capped:
            outcome = OUTCOME_ITERATION_CAP
        done = outcome is not None
        self._done = done

        current_error = state.error_history[-1]
        reward = compute_reward(
            record.duration_s,
            converged,
            state.iteration,
            self.config.reward_variant,
            bonus=self.config.convergence_bonus,
            reduction_rate=self.config.reduction_rate,
            error=current_error,
        )
        self._trace.append((record, reward))
        info = {
            "error": current_error,
            "duration_s": record.duration_s,
            "iteration": state.iteration,
            "lambda": float(lam),
            "timeout": capped,
            "outcome": outcome,
        }
        return StepOutcome(
            observation=self._observation(), reward=reward, done=done, info=info
        )

    def trace_csv(self) -> str:
        """Episode trace in the solver's CSV schema plus a reward column."""
        lines = ["iter,lambda,error,duration_s,reward"]
        for record, reward in self._trace:
            error = "" if not np.isfinite(record.error) else repr(record.error)
            lines.append(
                f"{record.iteration},{record.lam!r},{error},{record.duration_s!r},{reward!r}"
            )
        return "\n".join(lines) + "\n"
