"""Drug-conditioned diffusion over gene embeddings.

Steps are labelled ``t = 1..T``; schedule arrays are indexed ``t - 1``.
The reverse chain starts from standard normal noise at step ``T`` and the
states visited at ``T, T//2, T//3, T//4`` are blended into one hard negative
per conditioning drug.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    def _check(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 1) or np.any(t > self.T):
            raise ad.ContractError(f"diffusion step must lie in 1..{self.T}")
        return t - 1

    def alpha_at(self, t):
        return self.alpha[self._check(t)]

    def alpha_bar_at(self, t):
        return self.alpha_bar[self._check(t)]

    def sigma2_at(self, t):
        return self.sigma2[self._check(t)]


def build_schedule(T: int = 100, alpha_start: float = 0.9999, alpha_end: float = 0.98) -> NoiseSchedule:
    """Linear ``alpha`` from ``alpha_start`` to ``alpha_end`` over ``T`` steps.

    ``alpha_bar`` is the running product and ``sigma2[t] = (1 - alpha_bar[t-1]) /
    (1 - alpha_bar[t])`` with ``alpha_bar[0] = 1``, so ``sigma2[1] = 0``.
    """
    if int(T) < 4:
        raise ConfigError(f"need at least 4 diffusion steps, got {T}")
    if not 0.0 < alpha_end <= alpha_start < 1.0:
        raise ConfigError("alpha endpoints must satisfy 0 < alpha_end <= alpha_start < 1")
    T = int(T)
    k = np.arange(T, dtype=np.float64)
    alpha = alpha_start + (k / (T - 1)) * (alpha_end - alpha_start)
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma2 = (1.0 - prev) / (1.0 - alpha_bar)
    for arr in (alpha, alpha_bar, sigma2):
        arr.setflags(write=False)
    return NoiseSchedule(T, alpha, alpha_bar, sigma2)


def sample_indices(T: int) -> tuple[int, int, int, int]:
    """Steps ``T, T//2, T//3, T//4``.

    Small ``T`` can repeat a step (``T=4`` gives 4, 2, 1, 1); a repeated
    step simply contributes the same state twice.
    """
    if T < 4:
        raise ConfigError(f"need at least 4 diffusion steps, got {T}")
    return (T, T // 2, T // 3, T // 4)


@lru_cache(maxsize=4096)
def _step_embedding(t: int, d: int) -> np.ndarray:
    out = time_embedding_array(np.float64(t), d)
    out.setflags(write=False)
    return out


def time_embedding(t, d: int) -> np.ndarray:
    """Interleaved ``[sin(t w_i), cos(t w_i)]`` pairs, ``w_i = 10000^(-(i-1)/(d/2-1))``.

    ``t`` may be a scalar (returns length ``d``) or an array (returns
    ``(len(t), d)``).
    """
    if np.ndim(t) == 0 and float(t).is_integer() and d >= 2 and d % 2 == 0:
        return _step_embedding(int(t), d).copy()
    return time_embedding_array(t, d)


def time_embedding_array(t, d: int) -> np.ndarray:
    if d < 2 or d % 2:
        raise ConfigError(f"time embedding dimension must be even and >= 2, got {d}")
    half = d // 2
    if half == 1:
        omega = np.ones(1)
    else:
        omega = np.exp(-np.log(10000.0) / (half - 1) * np.arange(half, dtype=np.float64))
    t_arr = np.asarray(t, dtype=np.float64)
    ang = t_arr[..., None] * omega
    out = np.empty(ang.shape[:-1] + (d,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# ---------------------------------------------------------------------------
# Noise predictor
# ---------------------------------------------------------------------------


@dataclass
class DenoiserParams:
    """``eps_hat = relu([x_t || e_d || PE(t)] W1 + b1) W2 + b2``."""

    w1: Tensor  # (3d, d)
    b1: Tensor  # (d,)
    w2: Tensor  # (d, d)
    b2: Tensor  # (d,)

    @property
    def dim(self) -> int:
        return self.w2.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def predictor(self, cond: np.ndarray) -> "Predictor":
        """Values-only noise model for a fixed conditioning batch.

        Splits the first layer so the drug term is computed once per chain
        and the time term once per step.
        """
        d = self.dim
        w1 = self.w1.values
        w_x, w_d, w_t = w1[:d], w1[d : 2 * d], w1[2 * d :]
        base = np.atleast_2d(cond) @ w_d + self.b1.values
        w2, b2 = self.w2.values, self.b2.values

        def predict(x, _cond, t):
            pre = x @ w_x + base + _step_embedding(int(t), d) @ w_t
            return np.maximum(pre, 0.0) @ w2 + b2

        return predict

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "DenoiserParams":
        return cls(
            Tensor(_glorot(rng, 3 * d, d), requires_grad=True, name="denoiser.w1"),
            Tensor(np.zeros(d), requires_grad=True, name="denoiser.b1"),
            Tensor(_glorot(rng, d, d), requires_grad=True, name="denoiser.w2"),
            Tensor(np.zeros(d), requires_grad=True, name="denoiser.b2"),
        )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def predict_noise(params: DenoiserParams, e_gt, e_d0, t) -> Tensor:
    e_gt = e_gt if isinstance(e_gt, Tensor) else Tensor(np.atleast_2d(e_gt))
    e_d0 = e_d0 if isinstance(e_d0, Tensor) else Tensor(np.atleast_2d(e_d0))
    d = params.dim
    if e_gt.shape != e_d0.shape or e_gt.shape[1] != d:
        raise ad.DimensionError(f"denoiser inputs {e_gt.shape} / {e_d0.shape} do not match dimension {d}")
    t = np.broadcast_to(np.asarray(t), (e_gt.shape[0],))
    pe = Tensor(time_embedding(t, d))
    hidden = ad.relu(ad.add_bias(ad.matmul(ad.concat([e_gt, e_d0, pe], axis=1), params.w1), params.b1))
    return ad.add_bias(ad.matmul(hidden, params.w2), params.b2)


# ---------------------------------------------------------------------------
# Forward and reverse processes
# ---------------------------------------------------------------------------


def forward_diffuse(e_g0, t, schedule: NoiseSchedule, rng: np.random.Generator):
    """``e_gt = sqrt(abar_t) e_g0 + sqrt(1 - abar_t) eps`` with fresh standard normal ``eps``.

    Accepts a vector, a ``(B, d)`` array with scalar or per-row ``t``, or a
    Tensor (in which case ``e_gt`` is a differentiable Tensor).
    """
    values = e_g0.values if isinstance(e_g0, Tensor) else np.asarray(e_g0, dtype=np.float64)
    ab = np.asarray(schedule.alpha_bar_at(t), dtype=np.float64)
    if values.ndim == 2 and ab.ndim == 1:
        ab = ab[:, None]
    eps = rng.standard_normal(values.shape)
    a = np.sqrt(ab) * np.ones_like(values)
    noise = np.sqrt(1.0 - ab) * eps
    if isinstance(e_g0, Tensor):
        return ad.mul(e_g0, Tensor(a)) + Tensor(noise), eps
    return a * values + noise, eps


Predictor = Callable[[np.ndarray, np.ndarray, int], np.ndarray]
REVERSE_MEANS = ("paper", "ddpm")


def reverse_step(
    e_gt,
    t: int,
    params: DenoiserParams | None,
    e_d0,
    schedule: NoiseSchedule,
    rng: np.random.Generator | None,
    predictor: Predictor | None = None,
    stochastic: bool = True,
    mean: str = "paper",
) -> np.ndarray:
    """One denoising step ``t -> t-1`` (values only, no tape).

    ``mu = (x - c_t * eps_hat) / sqrt(alpha_t)`` and the result is
    ``mu + sigma_t z``.  With ``mean="paper"`` the noise coefficient is
    ``c_t = (1 - abar_t) / sqrt(1 - abar_t)``; ``mean="ddpm"`` uses
    ``c_t = (1 - alpha_t) / sqrt(1 - abar_t)`` instead.  ``predictor``
    overrides the learned noise model; ``stochastic=False`` forces
    ``sigma_t = 0``.
    """
    schedule._check(t)
    if mean not in REVERSE_MEANS:
        raise ConfigError(f"unknown reverse mean {mean!r}; expected one of {REVERSE_MEANS}")
    x = np.asarray(e_gt, dtype=np.float64)
    cond = np.asarray(e_d0, dtype=np.float64)
    if predictor is not None:
        eps_hat = np.asarray(predictor(x, cond, t), dtype=np.float64)
    else:
        eps_hat = predict_noise(params, np.atleast_2d(x), np.atleast_2d(cond), t).values.reshape(x.shape)
    a = schedule.alpha[t - 1]
    ab = schedule.alpha_bar[t - 1]
    c = (1.0 - ab) / np.sqrt(1.0 - ab) if mean == "paper" else (1.0 - a) / np.sqrt(1.0 - ab)
    mu = (x - c * eps_hat) / np.sqrt(a)
    s2 = schedule.sigma2[t - 1]
    if not stochastic or s2 == 0.0:
        return mu
    return mu + np.sqrt(s2) * rng.standard_normal(x.shape)


COMBINE_MODES = ("weighted", "sum", "average")


@dataclass(frozen=True)
class NegativeBundle:
    """Reverse-chain states and their blend.

    ``trajectory[k]`` is the state labelled ``T - k`` (so ``trajectory[0]`` is
    the initial noise); it holds states down to the smallest sampled step
    unless the full chain was requested.
    """

    trajectory: np.ndarray
    steps: tuple
    sampled: np.ndarray  # (4, B, d) in the order T, T//2, T//3, T//4
    weights: np.ndarray
    combined: np.ndarray


def combine_weights(weights: Sequence[float], mode: str = "weighted", normalize: bool = False) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (4,):
        raise ConfigError("exactly four negative weights are required")
    if mode == "weighted":
        if np.any(np.diff(w) >= 0):
            raise ConfigError("negative weights must be strictly decreasing")
        return w / w.sum() if normalize else w
    if mode == "sum":
        return np.ones(4)
    if mode == "average":
        return np.full(4, 0.25)
    raise ConfigError(f"unknown negative combination {mode!r}; expected one of {COMBINE_MODES}")


def generate_negatives(
    params: DenoiserParams,
    e_d0,
    schedule: NoiseSchedule,
    weights: Sequence[float],
    rng: np.random.Generator,
    mode: str = "weighted",
    normalize: bool = False,
    full_trajectory: bool = False,
    predictor: Predictor | None = None,
    mean: str = "paper",
) -> NegativeBundle:
    """Run the reverse chain conditioned on each row of ``e_d0`` and blend four states."""
    w = combine_weights(weights, mode, normalize)
    cond = np.atleast_2d(np.asarray(e_d0.values if isinstance(e_d0, Tensor) else e_d0, dtype=np.float64))
    steps = sample_indices(schedule.T)
    stop = 1 if full_trajectory else min(steps)
    if predictor is None:
        predictor = params.predictor(cond)
    x = rng.standard_normal(cond.shape)
    states = [x]
    for t in range(schedule.T, stop, -1):
        x = reverse_step(x, t, params, cond, schedule, rng, predictor=predictor, mean=mean)
        states.append(x)
    traj = np.stack(states)
    sampled = np.stack([traj[schedule.T - s] for s in steps])
    combined = np.tensordot(w, sampled, axes=1)
    return NegativeBundle(traj, steps, sampled, w, combined)


def diffusion_loss(params: DenoiserParams, e_g0: Tensor, e_d0: Tensor, schedule: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    """Batch mean of ``||eps - eps_hat(e_gt, e_d0, PE(t))||^2`` with ``t ~ U{1..T}`` per row."""
    b = e_g0.shape[0]
    if b == 0:
        raise ad.ContractError("diffusion loss needs a non-empty batch")
    t = rng.integers(1, schedule.T + 1, size=b)
    e_gt, eps = forward_diffuse(e_g0, t, schedule, rng)
    err = Tensor(eps) - predict_noise(params, e_gt, e_d0, t)
    return ad.sum(ad.square(err)) / b
