"""Noise schedules, respacing, forward noising, and reverse (posterior) sampling.

Timesteps are 1-based: t = 0 is the clean signal, t = T the noisiest level.
Schedule arrays are float64 so cumulative products survive long horizons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import CallCounter, Tensor, astensor
from .errors import ParameterError, ShapeError

__all__ = [
    "NoiseSchedule",
    "make_linear_schedule",
    "respace",
    "forward_sample",
    "denoised_estimate",
    "posterior_from_eps",
    "posterior_step",
    "unconditional_sample",
    "StepResult",
]

BETA_START = 1e-4  # standard range for a 1000-step schedule,
BETA_END = 0.02    # scaled by 1000/T for other horizons


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and derived quantities for a T-step diffusion.

    ``timestep_map[t-1]`` is the 1-based index of step t in the original
    (training) schedule; identity unless the schedule was respaced. Models
    are always conditioned on original indices.
    """

    betas: np.ndarray
    timestep_map: np.ndarray
    bars: np.ndarray | None = None  # pass through respacing so subsequences stay exact
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    posterior_variances: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ParameterError("schedule needs a 1-D beta sequence")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ParameterError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas) if self.bars is None else np.asarray(self.bars, np.float64)
        object.__setattr__(self, "bars", None)
        if alpha_bars.shape != betas.shape or np.any(np.diff(alpha_bars) >= 0):
            raise ParameterError("alpha_bar sequence must decrease strictly, one value per step")
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        post_var = betas * (1.0 - prev) / (1.0 - alpha_bars)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "posterior_variances", post_var)
        tmap = np.asarray(self.timestep_map, dtype=np.int64)
        if tmap.shape != betas.shape:
            raise ParameterError("timestep_map must have one entry per step")
        object.__setattr__(self, "timestep_map", tmap)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def _check_t(self, t: int, lo: int = 1):
        t = int(t)
        if not lo <= t <= self.T:
            raise IndexError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_t(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check_t(t) - 1])

    def alpha_bar(self, t: int) -> float:
        t = self._check_t(t, lo=0)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def posterior_variance(self, t: int) -> float:
        return float(self.posterior_variances[self._check_t(t) - 1])

    def map_index(self, t: int) -> int:
        """Original-schedule index for step t (for model time conditioning)."""
        return int(self.timestep_map[self._check_t(t) - 1])


def make_linear_schedule(T: int) -> NoiseSchedule:
    """Linear betas over T steps, endpoints 1e-4 and 0.02 scaled by 1000/T."""
    T = int(T)
    if T < 2:
        raise ParameterError("schedule needs at least 2 steps")
    scale = 1000.0 / T
    if BETA_END * scale >= 1.0:
        raise ParameterError(
            f"T={T} puts the scaled beta range outside (0, 1); respace a longer schedule instead"
        )
    betas = np.linspace(BETA_START * scale, BETA_END * scale, T, dtype=np.float64)
    return NoiseSchedule(betas=betas, timestep_map=np.arange(1, T + 1, dtype=np.int64))


def respace(s: NoiseSchedule, n: int) -> NoiseSchedule:
    """Keep n evenly spaced steps of ``s`` (always including the last).

    The respaced alpha-bar sequence is an exact subsequence of the parent's;
    betas are rebuilt so the cumulative products line up.
    """
    n = int(n)
    if not 2 <= n <= s.T:
        raise ParameterError(f"target step count {n} outside [2, {s.T}]")
    sel = np.floor(np.linspace(0, s.T - 1, n)).astype(np.int64)
    bars = s.alpha_bars[sel]
    prev = np.concatenate([[1.0], bars[:-1]])
    betas = 1.0 - bars / prev
    return NoiseSchedule(betas=betas, timestep_map=s.timestep_map[sel], bars=bars)


def forward_sample(s: NoiseSchedule, x_0, t: int, eps):
    """Noise x_0 directly to level t: sqrt(abar_t) x_0 + sqrt(1-abar_t) eps.

    Tensor operands stay on the tape (float32 in, Tensor out); plain arrays
    come back as plain arrays in their own dtype, so float64 callers keep
    the round trip with denoised_estimate exact far below 1e-5 at any depth.
    """
    abar = s.alpha_bar(t)
    if not isinstance(x_0, Tensor) and not isinstance(eps, Tensor):
        a, e = np.asarray(x_0), np.asarray(eps)
        if a.shape != e.shape:
            raise ShapeError(f"noise shape {e.shape} != signal shape {a.shape}")
        return a * a.dtype.type(math.sqrt(abar)) + e * e.dtype.type(math.sqrt(1.0 - abar))
    x_0, eps = astensor(x_0), astensor(eps)
    if x_0.data.shape != eps.data.shape:
        raise ShapeError(f"noise shape {eps.data.shape} != signal shape {x_0.data.shape}")
    return x_0 * math.sqrt(abar) + eps * math.sqrt(1.0 - abar)


def denoised_estimate(s: NoiseSchedule, x_t, eps_bar, t: int):
    """Invert the direct noising given a noise estimate:
    (x_t - sqrt(1-abar_t) eps_bar) / sqrt(abar_t). Same array-in/array-out,
    Tensor-in/Tensor-out convention as forward_sample."""
    abar = s.alpha_bar(t)
    if abar == 0.0:
        raise ParameterError("alpha_bar is zero at this step; estimate undefined")
    if not isinstance(x_t, Tensor) and not isinstance(eps_bar, Tensor):
        xv, ev = np.asarray(x_t), np.asarray(eps_bar)
        if xv.shape != ev.shape:
            raise ShapeError("noise estimate shape must match the noisy input")
        return (xv - ev * xv.dtype.type(math.sqrt(1.0 - abar))) / xv.dtype.type(math.sqrt(abar))
    x_t, eps_bar = astensor(x_t), astensor(eps_bar)
    if x_t.data.shape != eps_bar.data.shape:
        raise ShapeError("noise estimate shape must match the noisy input")
    return (x_t - eps_bar * math.sqrt(1.0 - abar)) * (1.0 / math.sqrt(abar))


class StepResult(NamedTuple):
    sample: Tensor
    mean: Tensor
    variance: float


def posterior_from_eps(s: NoiseSchedule, x_t, eps_bar, t: int):
    """Reverse-step mean and variance from a precomputed noise estimate.

    Array-in/array-out, Tensor-in/Tensor-out, like forward_sample.
    """
    t = int(t)
    coef = s.beta(t) / math.sqrt(1.0 - s.alpha_bar(t))
    scale = 1.0 / math.sqrt(s.alpha(t))
    if not isinstance(x_t, Tensor) and not isinstance(eps_bar, Tensor):
        xv, ev = np.asarray(x_t), np.asarray(eps_bar)
        mean = (xv - ev * xv.dtype.type(coef)) * xv.dtype.type(scale)
        return mean, s.posterior_variance(t)
    x_t, eps_bar = astensor(x_t), astensor(eps_bar)
    mean = (x_t - eps_bar * coef) * scale
    return mean, s.posterior_variance(t)


def posterior_step(s: NoiseSchedule, model, x_t, t: int, rng, counter: CallCounter | None = None) -> StepResult:
    """One reverse step x_t -> x_{t-1}; deterministic at t = 1.

    Returns the sample plus the mean and variance so callers can shift the
    mean before adding noise.
    """
    x_t = astensor(x_t)
    eps_bar = model.predict_noise(x_t, s.map_index(t), counter=counter)
    mean, var = posterior_from_eps(s, x_t, eps_bar, t)
    if t <= 1 or var == 0.0:
        return StepResult(mean, mean, var)
    z = Tensor(rng.standard_normal(x_t.data.shape).astype(np.float32))
    return StepResult(mean + z * math.sqrt(var), mean, var)


def unconditional_sample(s: NoiseSchedule, model, shape, rng, from_t: int | None = None,
                         from_x=None, counter: CallCounter | None = None) -> Tensor:
    """Run the reverse chain down to the clean signal.

    Starts from pure noise at t = T by default; pass ``from_t``/``from_x`` to
    continue a partially noised state instead. ``from_t = 0`` returns
    ``from_x`` unchanged.
    """
    if from_t is None:
        from_t = s.T
        x = Tensor(rng.standard_normal(shape).astype(np.float32))
    else:
        if from_x is None:
            raise ParameterError("from_x is required when from_t is given")
        x = astensor(from_x)
    for t in range(int(from_t), 0, -1):
        x = posterior_step(s, model, x, t, rng, counter=counter).sample
    return x
