"""Noise schedule arithmetic and the forward/reverse diffusion steps.

Timesteps are 1-indexed: ``t = 1`` is the least noisy level and ``t = T`` the
most noisy. ``alpha_bar(0)`` is the clean-image convention and equals
:data:`ALPHA_BAR_ZERO`.

All step functions are plain arithmetic on array-likes, so they accept numpy
arrays and torch tensors alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

ALPHA_BAR_ZERO = 1.0
DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with its cumulative product table.

    ``betas[i]`` and ``alphas_bar[i]`` belong to timestep ``t = i + 1``.
    """

    T: int
    betas: np.ndarray
    alphas_bar: np.ndarray

    def __post_init__(self):
        self.betas.setflags(write=False)
        self.alphas_bar.setflags(write=False)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at timestep ``t`` (``t = 0`` gives 1)."""
        if t == 0:
            return ALPHA_BAR_ZERO
        self.check_timestep(t)
        return float(self.alphas_bar[t - 1])

    def beta(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.betas[t - 1])

    def check_timestep(self, t: int) -> None:
        if not 1 <= int(t) <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


def build_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Build a linear schedule of ``T`` betas from ``beta_start`` to ``beta_end``.

    Args:
        T: number of diffusion steps, at least 1.
        beta_start: first beta, in (0, 1).
        beta_end: last beta, in [beta_start, 1).

    Returns:
        The schedule with ``alphas_bar[t] = prod_{s<=t} (1 - betas[s])``.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(T=int(T), betas=betas, alphas_bar=alphas_bar)


def schedule_from_betas(betas) -> NoiseSchedule:
    """Schedule from an explicit beta table (used for hand-checked cases)."""
    betas = np.asarray(betas, dtype=np.float64).copy()
    if betas.ndim != 1 or betas.size == 0:
        raise ValueError("betas must be a non-empty 1-D sequence")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("betas must lie in (0, 1)")
    return NoiseSchedule(T=betas.size, betas=betas, alphas_bar=np.cumprod(1.0 - betas))


@dataclass
class NoisyState:
    """A noised image together with its timestep and the noise that produced it."""

    x_t: Any
    t: int
    epsilon: Optional[Any] = None


def _same_shape(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_noise(x0, t: int, noise, schedule: NoiseSchedule) -> NoisyState:
    """Sample ``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`` for a given noise draw.

    ``t = 0`` is accepted and returns ``x0`` (no noise), which the restoration
    code relies on at the end of a trajectory.
    """
    _same_shape(x0, noise, "forward_noise")
    ab = schedule.alpha_bar(t)
    x_t = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise
    return NoisyState(x_t=x_t, t=t, epsilon=noise)


def posterior_step(
    x_t, x0_hat, t: int, schedule: NoiseSchedule, t_prev: Optional[int] = None
):
    """Zero-variance reverse step from ``t`` to ``t_prev`` given an ``x0`` estimate.

    The implied noise ``(x_t - sqrt(ab_t) x0_hat) / sqrt(1 - ab_t)`` is carried
    over to level ``t_prev`` (default ``t - 1``). Strided samplers pass an
    explicit ``t_prev < t - 1``.

    Raises:
        ValueError: for ``t = 1`` (use :func:`terminal_step`) or bad ``t_prev``.
    """
    _same_shape(x_t, x0_hat, "posterior_step")
    schedule.check_timestep(t)
    if t < 2:
        raise ValueError("t = 1 has no posterior step; route it to terminal_step")
    if t_prev is None:
        t_prev = t - 1
    if not 1 <= t_prev < t:
        raise ValueError(f"t_prev must lie in [1, {t - 1}], got {t_prev}")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    eps = (x_t - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps


def terminal_step(x1, x0_hat_at_1):
    """Final step at ``t = 1``: the output is the denoiser prediction itself."""
    return x0_hat_at_1


def strided_timesteps(n_steps: int, t_max: int) -> list[int]:
    """Evenly strided descending timesteps over ``[1, t_max]``, including both ends.

    If ``n_steps`` exceeds the number of available integer timesteps the full
    range is returned.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    if n_steps == 1:
        return [int(t_max)]
    n = min(int(n_steps), int(t_max))
    ts = np.unique(np.round(np.linspace(1, t_max, n)).astype(int))
    return [int(t) for t in ts[::-1]]


def to_model_range(x):
    """Map [0, 1] intensities to the symmetric [-1, 1] model range."""
    return x * 2.0 - 1.0


def from_model_range(x):
    """Inverse of :func:`to_model_range`."""
    return (x + 1.0) / 2.0
