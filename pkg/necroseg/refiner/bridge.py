"""Brownian-bridge schedule between a ground-truth mask x0 and a coarse mask y

The forward marginal is ``x_t = (1 - m_t) x0 + m_t y + sqrt(delta_t) eps`` with
``m_t = t / T`` and ``delta_t = 2 s (m_t - m_t**2)``. The network is trained to
predict the residual ``m_t (y - x0) + sqrt(delta_t) eps``, i.e. ``x_t - x0``.
"""
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from necroseg.exceptions import NumericalError, ShapeMismatchError, TimestepError
from necroseg.tiling import MaskKind, ProbMask

Step = Union[int, torch.Tensor]


@dataclass
class BridgeSchedule:
    T: int
    s: float
    m: np.ndarray
    delta: np.ndarray
    delta_cond: np.ndarray
    delta_tilde: np.ndarray

    def to_dict(self) -> dict:
        return {"T": int(self.T), "s": float(self.s)}

    def check_step(self, t: Step, low: int = 0, high: int = None) -> None:
        high = self.T if high is None else high
        values = t if isinstance(t, torch.Tensor) else torch.as_tensor([t])
        if values.numel() and (int(values.min()) < low or int(values.max()) > high):
            raise TimestepError(f"Timestep must lie in {low}..{high}, got {values.tolist()}")


@dataclass
class Posterior:
    """Gaussian q(x_s | x_t, x0, y) as mean = c_x0 x0 + c_xt x_t + c_y y"""

    c_x0: float
    c_xt: float
    c_y: float
    var: float


def build_schedule(T: int, s: float = 1.0) -> BridgeSchedule:
    """Bridge coefficients for T steps and variance scale s

    Args:
        T (int): number of steps, at least 2
        s (float): variance scale, positive
    Returns:
        BridgeSchedule: m, delta, one-step transition and posterior variances
    """
    if int(T) != T or T < 2:
        raise TimestepError(f"A bridge needs at least 2 steps, got T={T}")
    if not s > 0:
        raise TimestepError(f"Variance scale must be positive, got s={s}")
    T = int(T)
    m = np.arange(T + 1, dtype=np.float64) / T
    delta = 2.0 * s * (m - m**2)
    delta[0] = delta[T] = 0.0
    delta_cond = np.zeros(T + 1)
    delta_cond[1:] = delta[1:] - delta[:-1] * (1.0 - m[1:]) ** 2 / (1.0 - m[:-1]) ** 2
    delta_cond = np.maximum(delta_cond, 0.0)
    delta_tilde = np.zeros(T + 1)
    inner = np.arange(2, T)
    delta_tilde[inner] = delta_cond[inner] * delta[inner - 1] / delta[inner]
    # x_T = y carries no information about x_{T-1}
    delta_tilde[T] = delta[T - 1]
    return BridgeSchedule(T=T, s=float(s), m=m, delta=delta, delta_cond=delta_cond, delta_tilde=delta_tilde)


def posterior(schedule: BridgeSchedule, t: int, s: int) -> Posterior:
    """Exact posterior of x_s given x_t, x0 and y for 0 <= s < t <= T"""
    if not 0 <= s < t <= schedule.T:
        raise TimestepError(f"Posterior needs 0 <= s < t <= {schedule.T}, got s={s}, t={t}")
    m_t, m_s = schedule.m[t], schedule.m[s]
    d_t, d_s = schedule.delta[t], schedule.delta[s]
    if d_t == 0.0:
        return Posterior(c_x0=1.0 - m_s, c_xt=0.0, c_y=m_s, var=d_s)
    a = (1.0 - m_t) / (1.0 - m_s)
    b = m_t - a * m_s
    d_ts = max(d_t - a * a * d_s, 0.0)
    c_xt = a * d_s / d_t
    return Posterior(
        c_x0=d_ts / d_t * (1.0 - m_s),
        c_xt=c_xt,
        c_y=d_ts / d_t * m_s - c_xt * b,
        var=d_ts * d_s / d_t,
    )


def _as_tensor(mask) -> torch.Tensor:
    if isinstance(mask, ProbMask):
        return torch.from_numpy(mask.values.astype(np.float64))
    return torch.as_tensor(mask)


def _coef(values: np.ndarray, t: Step, like: torch.Tensor) -> torch.Tensor:
    """Schedule values at t, broadcastable against a batch shaped like `like`"""
    table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        return table[t.to(like.device)].reshape((-1,) + (1,) * (like.ndim - 1))
    return table[int(t)]


def forward_sample(x0, y, t: Step, schedule: BridgeSchedule, generator: torch.Generator = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Draw x_t from the bridge marginal

    Returns:
        Tuple[torch.Tensor, torch.Tensor]: x_t and the standard normal noise used
    """
    if isinstance(x0, ProbMask) and x0.kind != MaskKind.ONE_HOT:
        raise ShapeMismatchError(f"x0 must be a one-hot mask, got {x0.kind.value}")
    if isinstance(y, ProbMask) and y.kind != MaskKind.COARSE:
        raise ShapeMismatchError(f"y must be a coarse mask, got {y.kind.value}")
    x0, y = _as_tensor(x0), _as_tensor(y)
    if x0.shape != y.shape:
        raise ShapeMismatchError(f"x0 {tuple(x0.shape)} and y {tuple(y.shape)} differ in shape")
    schedule.check_step(t)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    m = _coef(schedule.m, t, x0)
    sd = _coef(np.sqrt(schedule.delta), t, x0)
    return (1.0 - m) * x0 + m * y + sd * eps, eps


def noise_target(x0, y, t: Step, eps: torch.Tensor, schedule: BridgeSchedule) -> torch.Tensor:
    """Residual the denoiser learns: m_t (y - x0) + sqrt(delta_t) eps"""
    schedule.check_step(t)
    x0, y = _as_tensor(x0), _as_tensor(y)
    m = _coef(schedule.m, t, x0)
    sd = _coef(np.sqrt(schedule.delta), t, x0)
    return m * (y - x0) + sd * eps


def transition_loss(prediction: torch.Tensor, target: torch.Tensor, t: Step = None, schedule: BridgeSchedule = None) -> torch.Tensor:
    """Unweighted mean squared error between predicted and true residual"""
    if prediction.shape != target.shape:
        raise ShapeMismatchError(f"Prediction {tuple(prediction.shape)} and target {tuple(target.shape)} differ in shape")
    if schedule is not None and t is not None:
        schedule.check_step(t)
    if not (torch.isfinite(prediction).all() and torch.isfinite(target).all()):
        raise NumericalError("Non-finite values in transition loss inputs")
    return F.mse_loss(prediction, target)


def reconstruct_x0(x_t: torch.Tensor, y: torch.Tensor, eps_pred: torch.Tensor, t: Step, schedule: BridgeSchedule) -> torch.Tensor:
    """Invert the forward map: (x_t - m_t y - sqrt(delta_t) eps) / (1 - m_t), for t < T"""
    schedule.check_step(t, high=schedule.T - 1)
    y = _as_tensor(y)
    m = _coef(schedule.m, t, x_t)
    sd = _coef(np.sqrt(schedule.delta), t, x_t)
    return (x_t - m * y - sd * eps_pred) / (1.0 - m)


def residual_to_noise(residual: torch.Tensor, x_t: torch.Tensor, y: torch.Tensor, t: Step, schedule: BridgeSchedule) -> torch.Tensor:
    """Noise estimate implied by a predicted residual, for 0 < t < T"""
    schedule.check_step(t, low=1, high=schedule.T - 1)
    m = _coef(schedule.m, t, x_t)
    sd = _coef(np.sqrt(schedule.delta), t, x_t)
    return ((1.0 - m) * residual - m * (y - x_t)) / sd


def residual_to_x0(residual: torch.Tensor, x_t: torch.Tensor) -> torch.Tensor:
    """x0 estimate from a predicted residual; agrees with reconstruct_x0 for t < T and stays defined at T"""
    return x_t - residual


def segmentation_loss(x0_hat: torch.Tensor, x0: torch.Tensor) -> torch.Tensor:
    """Pixel-mean cross-entropy of softmax(x0_hat) against a one-hot x0

    Channels are axis 1 of a (B, C, h, w) batch or axis 0 of a single (C, h, w) mask.
    """
    x0 = _as_tensor(x0).to(x0_hat.dtype)
    if x0_hat.shape != x0.shape:
        raise ShapeMismatchError(f"x0_hat {tuple(x0_hat.shape)} and x0 {tuple(x0.shape)} differ in shape")
    if not torch.isfinite(x0_hat).all():
        raise NumericalError("Non-finite x0 estimate in segmentation loss")
    if x0_hat.ndim == 3:
        x0_hat, x0 = x0_hat.unsqueeze(0), x0.unsqueeze(0)
    return -(x0 * F.log_softmax(x0_hat, dim=1)).sum(dim=1).mean()


def sampling_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Evenly spaced descending timesteps from T to 0, n_steps transitions"""
    if int(n_steps) != n_steps or not 1 <= n_steps <= T:
        raise TimestepError(f"n_steps must lie in 1..{T}, got {n_steps}")
    steps = np.unique(np.round(np.linspace(T, 0, int(n_steps) + 1)).astype(int))
    return steps[::-1]
