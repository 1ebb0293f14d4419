"""Discrete noise levels and the skip/output scalings of the consistency function.

The forward process is the variance-exploding ODE dx = sqrt(2t) dw; it is
never simulated. Training only ever needs its discrete marginals
x_{t_i} = x_0 + t_i z on the rho-warped grid below.
"""
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    epsilon: float = 0.002
    T: float = 80.0
    rho: float = 7.0
    N: int = 40
    sigma_data: float = 0.5
    times: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.times is None:
            object.__setattr__(self, "times", _grid(self.epsilon, self.T, self.rho, self.N))

    def t(self, i):
        """Time t_i for a 1-based index (scalar or integer array)."""
        idx = np.asarray(i)
        if np.any(idx < 1) or np.any(idx > self.N):
            raise ValidationError(f"index {i} outside 1..{self.N}")
        return self.times[idx - 1]

    def params(self):
        return {
            "epsilon": self.epsilon,
            "T": self.T,
            "rho": self.rho,
            "N": self.N,
            "sigma_data": self.sigma_data,
        }


def _grid(epsilon, T, rho, N):
    lo = epsilon ** (1.0 / rho)
    hi = T ** (1.0 / rho)
    frac = np.arange(N, dtype=np.float64) / (N - 1)
    times = (lo + frac * (hi - lo)) ** rho
    # pin the endpoints; the power round trip is not exact in floating point
    times[0] = epsilon
    times[-1] = T
    times.flags.writeable = False
    return times


def make_schedule(epsilon=0.002, T=80.0, rho=7.0, N=40, sigma_data=0.5):
    if not (0.0 <= epsilon < T):
        raise ValidationError(f"need 0 <= epsilon < T, got epsilon={epsilon}, T={T}")
    if rho < 1:
        raise ValidationError(f"rho must be >= 1, got {rho}")
    if int(N) != N or N < 2:
        raise ValidationError(f"N must be an integer >= 2, got {N}")
    if sigma_data <= 0:
        raise ValidationError(f"sigma_data must be positive, got {sigma_data}")
    return NoiseSchedule(float(epsilon), float(T), float(rho), int(N), float(sigma_data))


@dataclass(frozen=True, eq=False)
class NoisedSample:
    x_t: object
    t: object
    z: object


def add_noise(x0, schedule, i, z):
    """x0 + t_i * z. ``i`` is 1-based, scalar or one index per batch row."""
    if tuple(z.shape) != tuple(x0.shape):
        raise ValidationError(f"noise shape {tuple(z.shape)} != sample shape {tuple(x0.shape)}")
    t = schedule.t(i)
    scale = _broadcast(t, x0)
    return NoisedSample(x0 + scale * z, t, z)


def _broadcast(t, like):
    """Reshape per-sample times so they broadcast against a (B, ...) tensor."""
    if np.ndim(t) == 0:
        return float(t)
    t = np.asarray(t, dtype=np.float64)
    shape = (-1,) + (1,) * (like.ndim - 1)
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(t, dtype=like.dtype, device=like.device).reshape(shape)
    return t.reshape(shape)


def _check_t(t, schedule):
    if np.any(np.asarray(t) < schedule.epsilon):
        raise ValidationError(f"t={t} below epsilon={schedule.epsilon}")


def c_skip(t, schedule):
    _check_t(t, schedule)
    t = np.asarray(t, dtype=np.float64)
    sd2 = schedule.sigma_data ** 2
    out = sd2 / ((t - schedule.epsilon) ** 2 + sd2)
    return float(out) if out.ndim == 0 else out


def c_out(t, schedule):
    _check_t(t, schedule)
    t = np.asarray(t, dtype=np.float64)
    sd = schedule.sigma_data
    out = sd * (t - schedule.epsilon) / np.sqrt(sd * sd + t * t)
    return float(out) if out.ndim == 0 else out


def consistency_apply(net, x_t, t, schedule):
    """c_skip(t) * x_t + c_out(t) * F(x_t, t).

    ``net`` is any callable ``net(x_t, t) -> tensor`` shaped like ``x_t``
    (modules returning ``(output, features)`` are unwrapped). At t = epsilon
    this returns x_t unchanged whatever the network computes.
    """
    out = net(x_t, t)
    if isinstance(out, tuple):
        out = out[0]
    if tuple(out.shape) != tuple(x_t.shape):
        raise ValidationError(f"network output {tuple(out.shape)} != input {tuple(x_t.shape)}")
    skip = _broadcast(c_skip(t, schedule), x_t)
    scale = _broadcast(c_out(t, schedule), x_t)
    return skip * x_t + scale * out
