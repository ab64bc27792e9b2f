"""Conditional denoising-diffusion action decoder.

Generates one action from Gaussian noise by iterative denoising, conditioned
on the current state and a skill vector.  Uses a discretized
variance-preserving beta schedule and epsilon-prediction training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Dropout, LayerNorm, Linear, Module, ModuleList
from .tensor import NumericFault, Tensor


@dataclass
class NoiseSchedule:
    """Discrete VP schedule; index i holds the value for diffusion time t=i+1."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_min: float
    beta_max: float

    def alpha_bar_prev(self, t):
        """alpha_bar at t-1 with the t=0 convention alpha_bar_0 = 1."""
        return 1.0 if t == 1 else self.alpha_bar[t - 2]

    def posterior_variance(self, t):
        """Variance of the reverse transition at step t."""
        return self.beta[t - 1] * (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar[t - 1])

    def to_dict(self):
        return {
            "T": self.T,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "beta": self.beta.tolist(),
            "alpha": self.alpha.tolist(),
            "alpha_bar": self.alpha_bar.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            T=int(d["T"]),
            beta=np.asarray(d["beta"], dtype=np.float64),
            alpha=np.asarray(d["alpha"], dtype=np.float64),
            alpha_bar=np.asarray(d["alpha_bar"], dtype=np.float64),
            beta_min=float(d["beta_min"]),
            beta_max=float(d["beta_max"]),
        )


def build_schedule(T, beta_min, beta_max):
    """Discretize the continuous-time VP schedule into T steps."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_min <= beta_max:
        raise ValueError(f"need 0 < beta_min <= beta_max, got ({beta_min}, {beta_max})")
    t = np.arange(1, T + 1, dtype=np.float64)
    beta = 1.0 - np.exp(-beta_min / T - (beta_max - beta_min) * (2.0 * t - 1.0) / (2.0 * T * T))
    if np.any(beta <= 0.0) or np.any(beta >= 1.0):
        raise ValueError(f"schedule produced beta outside (0, 1): {beta}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(
        T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
        beta_min=float(beta_min), beta_max=float(beta_max),
    )


def forward_noise(x0, t, eps, schedule):
    """Closed-form marginal: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise T.ShapeError("forward_noise", x0.shape, eps.shape)
    t_arr = np.asarray(t, dtype=np.int64)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ValueError(f"diffusion time out of range 1..{schedule.T}: {t}")
    abar = schedule.alpha_bar[t_arr - 1]
    if x0.ndim == 2 and t_arr.ndim == 1:
        abar = abar[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


class DenseBlock(Module):
    """Expand 4x, compress back, residual, layer-norm."""

    def __init__(self, hidden, dropout, rng):
        super().__init__()
        self.expand = Linear(hidden, 4 * hidden, rng)
        self.compress = Linear(4 * hidden, hidden, rng)
        self.norm = LayerNorm(hidden)
        self.drop = Dropout(dropout, rng)

    def forward(self, x):
        h = self.compress(T.relu(self.expand(x)))
        return self.norm(T.add(x, self.drop(h)))


class NoiseNet(Module):
    """Layer-normalized MLP predicting the noise added to an action.

    Input is the concatenation of the noisy action, the state, the skill
    vector, and a sinusoidal embedding of the diffusion time.
    """

    def __init__(self, action_dim, state_dim, skill_dim, rng,
                 hidden=256, time_dim=16, blocks=4, dropout=0.1):
        super().__init__()
        self.action_dim = action_dim
        self.state_dim = state_dim
        self.skill_dim = skill_dim
        self.time_dim = time_dim
        in_dim = action_dim + state_dim + skill_dim + time_dim
        self.inp = Linear(in_dim, hidden, rng)
        self.blocks = ModuleList(DenseBlock(hidden, dropout, rng) for _ in range(blocks))
        self.out = Linear(hidden, action_dim, rng)

    def forward(self, x_t, s, z, t):
        x_t = T.as_tensor(x_t)
        s = T.as_tensor(s)
        z = z if isinstance(z, Tensor) else T.as_tensor(z)
        t_emb = T.sinusoidal_embedding(np.asarray(t, dtype=np.int64), self.time_dim, dtype=x_t.dtype)
        h = T.concat([x_t, s, z, t_emb], axis=1)
        h = self.inp(h)
        for block in self.blocks:
            h = block(h)
        return self.out(h)


def noise_pred_loss(x0, s, z, t, eps, net, schedule):
    """Mean-squared error between eps and the net's prediction at x_t."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    x_t = forward_noise(x0, t, eps, schedule)
    pred = net(x_t, s, z, t)
    diff = T.sub(pred, T.constant(eps.astype(pred.dtype)))
    return T.reduce_mean(T.mul(diff, diff))


def sample_action(s, z, net, schedule, rng, action_low, action_high):
    """Ancestral DDPM sampling of one action batch conditioned on (s, z).

    Returns an array of shape (batch, action_dim) clipped to the action box.
    """
    s = np.atleast_2d(np.asarray(s))
    z = np.atleast_2d(np.asarray(z))
    batch = s.shape[0]
    dim = net.action_dim
    net.eval()
    x = rng.standard_normal((batch, dim))
    with T.no_grad():
        for t in range(schedule.T, 0, -1):
            beta_t = schedule.beta[t - 1]
            alpha_t = schedule.alpha[t - 1]
            abar_t = schedule.alpha_bar[t - 1]
            t_vec = np.full(batch, t, dtype=np.int64)
            eps_hat = net(x, s, z, t_vec).data
            mean = (x - beta_t / np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(alpha_t)
            if t > 1:
                noise = rng.standard_normal((batch, dim))
                x = mean + np.sqrt(schedule.posterior_variance(t)) * noise
            else:
                x = mean
            if not np.all(np.isfinite(x)):
                raise NumericFault(f"non-finite denoised action at diffusion step t={t}")
    return np.clip(x, action_low, action_high)
