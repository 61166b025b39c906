"""Noise schedules: the decreasing signal-retention sequence and its
per-step rates, plus timestep subsequences for accelerated sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Prior matching: sqrt(alpha_T) below this means the fully-noised
# marginal is indistinguishable from a standard normal at desk scale.
PRIOR_MATCH_LIMIT = 0.05


@dataclass(frozen=True)
class NoiseSchedule:
    """steps = T, beta = per-step rates, alpha = cumulative products
    alpha_t = prod_{s<=t}(1 - beta_s). 1-indexed via `alpha_bar`."""

    steps: int
    beta: np.ndarray
    alpha: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha at step t, with alpha_bar(0) == 1 exactly."""
        if not 0 <= t <= self.steps:
            raise ValueError(f"timestep {t} outside [0, {self.steps}]")
        return 1.0 if t == 0 else float(self.alpha[t - 1])

    def __eq__(self, other):
        return (isinstance(other, NoiseSchedule)
                and self.steps == other.steps
                and np.array_equal(self.beta, other.beta)
                and np.array_equal(self.alpha, other.alpha))


def build_linear_schedule(steps: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linearly spaced beta from beta_min to beta_max over `steps` steps.

    Rejects schedules whose terminal sqrt(alpha_T) is not small enough
    for the standard-normal prior to match the noised data marginal.
    """
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, steps)
    alpha = np.cumprod(1.0 - beta)
    root_alpha_T = float(np.sqrt(alpha[-1]))
    if root_alpha_T >= PRIOR_MATCH_LIMIT:
        raise ValueError(
            f"sqrt(alpha_T) = {root_alpha_T:.4f} >= {PRIOR_MATCH_LIMIT}; "
            "raise steps or beta_max so the terminal marginal matches the prior")
    sched = NoiseSchedule(steps=steps, beta=beta, alpha=alpha)
    _validate(sched)
    return sched


def _validate(sched: NoiseSchedule) -> None:
    a = sched.alpha
    if len(a) != sched.steps or len(sched.beta) != sched.steps:
        raise ValueError("schedule arrays must have length == steps")
    if not (np.all(a > 0.0) and np.all(a <= 1.0)):
        raise ValueError("alpha values must lie in (0, 1]")
    if not np.all(np.diff(a) < 0.0):
        raise ValueError("alpha must be strictly decreasing")
    if not np.array_equal(np.cumprod(1.0 - sched.beta), a):
        raise ValueError("alpha is not the exact cumulative product of (1 - beta)")


def schedule_from_parts(steps: int, beta_min: float, beta_max: float,
                        alpha: np.ndarray) -> NoiseSchedule:
    """Rebuild a schedule from checkpoint fields, verifying the stored
    alpha array bit-matches what (steps, beta_min, beta_max) generate."""
    rebuilt = build_linear_schedule(steps, beta_min, beta_max)
    if not np.array_equal(rebuilt.alpha, alpha):
        raise ValueError("stored alpha array does not match its generating parameters")
    return rebuilt


def uniform_subsequence(steps: int, count: int) -> tuple[int, ...]:
    """`count` timesteps spread uniformly over [1, steps], ending at steps.

    Spacing >= 1 is guaranteed by count <= steps, so half-up rounding of
    the uniform grid never collides.
    """
    if not 1 <= count <= steps:
        raise ValueError(f"subsequence length {count} outside [1, {steps}]")
    if count == 1:
        return (steps,)
    grid = np.linspace(1.0, float(steps), count)
    tau = tuple(int(v) for v in np.floor(grid + 0.5))
    validate_subsequence(tau, steps)
    return tau


def validate_subsequence(tau, steps: int) -> tuple[int, ...]:
    """Check a timestep subsequence: strictly increasing, within [1, steps],
    and containing the final step."""
    tau = tuple(int(t) for t in tau)
    if not tau:
        raise ValueError("timestep subsequence is empty")
    if any(not 1 <= t <= steps for t in tau):
        raise ValueError(f"subsequence entries must lie in [1, {steps}]: {tau}")
    if any(b <= a for a, b in zip(tau, tau[1:])):
        raise ValueError(f"subsequence must be strictly increasing: {tau}")
    if tau[-1] != steps:
        raise ValueError(f"subsequence must end at {steps}, ends at {tau[-1]}")
    return tau
