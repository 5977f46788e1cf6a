"""Forward noising process, conditional score models, and reverse sampling.

The forward process is a Gaussian random walk: each step adds N(0, beta^2 I)
noise, so the marginal at step t is the data convolved with N(0, t beta^2 I)
and the terminal marginal is approximately N(0, T beta^2 I). The reverse
transition moves against the score of the smoothed marginal:

    z_{t-1} ~ N(z_t + beta_t^2 * s(z_t, t, c), beta_t^2 I)

Two score models are provided: an exact conditional Gaussian-mixture model
(closed-form smoothed density, used as the test oracle and the analytic
experiment testbed) and a small fully connected denoiser trained by noise
prediction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol

import numpy as np

from .errors import NumericError, ScheduleError, TrainingError

__all__ = [
    "ForwardVariant",
    "NoiseSchedule",
    "GaussianMixtureModel",
    "DenoiserNet",
    "TrainConfig",
    "ScoreModel",
    "forward_perturb",
    "analytic_score",
    "tweedie_denoise",
    "ancestral_sample",
    "train_denoiser",
    "save_checkpoint",
    "load_checkpoint",
]


class ForwardVariant(str, Enum):
    RANDOM_WALK = "random_walk"


@dataclass(frozen=True)
class NoiseSchedule:
    """Step count and per-step noise level of the forward random walk.

    ``beta`` is the constant per-step noise standard deviation. A per-step
    override (``betas``, length T) is accepted for non-constant schedules;
    the marginal variance at step t is then the cumulative sum of squares.
    """

    T: int
    beta: float
    variant: ForwardVariant = ForwardVariant.RANDOM_WALK
    betas: np.ndarray | None = None

    def __post_init__(self):
        if self.T < 1:
            raise ScheduleError(f"T must be >= 1, got {self.T}")
        if self.beta <= 0:
            raise ScheduleError(f"beta must be positive, got {self.beta}")
        if self.betas is not None:
            betas = np.asarray(self.betas, dtype=float)
            if betas.shape != (self.T,) or np.any(betas <= 0):
                raise ScheduleError("betas override must be length T and positive")
            object.__setattr__(self, "betas", betas)

    def beta_at(self, t: int) -> float:
        """Noise stddev applied at step t (1-indexed)."""
        self._check_step(t)
        if self.betas is None:
            return self.beta
        return float(self.betas[t - 1])

    def cum_var(self, t: int) -> float:
        """Marginal noise variance accumulated after t forward steps."""
        if t == 0:
            return 0.0
        self._check_step(t)
        if self.betas is None:
            return t * self.beta**2
        return float(np.sum(self.betas[:t] ** 2))

    def cum_var_array(self, ts: np.ndarray) -> np.ndarray:
        """Vectorized cum_var for an array of step indices in [1, T]."""
        ts = np.asarray(ts)
        if np.any(ts < 1) or np.any(ts > self.T):
            raise ScheduleError("step indices outside [1, T]")
        if self.betas is None:
            return ts * self.beta**2
        return np.cumsum(self.betas**2)[ts - 1]

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"step t={t} outside [1, {self.T}]")

    @classmethod
    def desk_default(cls, data_variance: float, T: int = 100) -> "NoiseSchedule":
        # choose beta so the terminal noise dominates the data spread
        beta = float(np.sqrt(4.0 * data_variance / T))
        return cls(T=T, beta=beta)

    @classmethod
    def linear_variance(
        cls, T: int = 1000, var_min: float = 1e-4, var_max: float = 0.02
    ) -> "NoiseSchedule":
        betas = np.sqrt(np.linspace(var_min, var_max, T))
        return cls(T=T, beta=float(betas[0]), betas=betas)


class ScoreModel(Protocol):
    """Conditional score function of the t-step smoothed model marginal."""

    dim: int

    def score(
        self, z: np.ndarray, t: int, c: np.ndarray | None, schedule: NoiseSchedule
    ) -> np.ndarray: ...


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


@dataclass(frozen=True)
class GaussianMixtureModel:
    """Isotropic Gaussian mixture with affine context-dependent means.

    Component k has mean ``means[k] + context_maps[k] @ c`` and covariance
    ``stddevs[k]^2 I``. The t-step smoothed marginal is the same mixture with
    each component variance increased by the accumulated noise variance, so
    scores and densities stay in closed form at every diffusion step.
    """

    weights: np.ndarray
    means: np.ndarray  # (m, K)
    stddevs: np.ndarray  # (m,)
    context_maps: np.ndarray | None = None  # (m, K, d_c)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        sd = np.atleast_1d(np.asarray(self.stddevs, dtype=float))
        if abs(float(w.sum()) - 1.0) > 1e-12 or np.any(w < 0):
            raise ValueError("component weights must sum to 1")
        if np.any(sd <= 0):
            raise ValueError("component stddevs must be positive")
        if mu.shape[0] != w.shape[0] or sd.shape[0] != w.shape[0]:
            raise ValueError("component count mismatch")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stddevs", sd)
        if self.context_maps is not None:
            cm = np.asarray(self.context_maps, dtype=float)
            if cm.shape[:2] != mu.shape:
                raise ValueError("context_maps must be (m, K, d_c)")
            object.__setattr__(self, "context_maps", cm)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def component_means(self, c: np.ndarray | None) -> np.ndarray:
        if self.context_maps is None or c is None:
            return self.means
        return self.means + self.context_maps @ np.asarray(c, dtype=float)

    def _smoothed_vars(self, extra_var: float) -> np.ndarray:
        return self.stddevs**2 + extra_var

    def log_density(
        self, z: np.ndarray, c: np.ndarray | None = None, extra_var: float = 0.0
    ) -> np.ndarray:
        """Log density of the mixture smoothed by extra isotropic variance."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        mu = self.component_means(c)  # (m, K)
        var = self._smoothed_vars(extra_var)  # (m,)
        diff = z[:, None, :] - mu[None, :, :]  # (n, m, K)
        k = self.dim
        log_comp = (
            -0.5 * np.sum(diff**2, axis=-1) / var
            - 0.5 * k * np.log(2.0 * np.pi * var)
            + np.log(self.weights)
        )
        return _logsumexp(log_comp, axis=-1)

    def score(
        self, z: np.ndarray, t: int, c: np.ndarray | None, schedule: NoiseSchedule
    ) -> np.ndarray:
        return analytic_score(self, z, t, c, schedule)

    def sample_exact(
        self, n: int, c: np.ndarray | None, rng: np.random.Generator
    ) -> np.ndarray:
        """Direct draws from the clean-data mixture (quadrature/KS oracle aid)."""
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        mu = self.component_means(c)
        return mu[comps] + self.stddevs[comps, None] * rng.standard_normal((n, self.dim))


def forward_perturb(
    z0: np.ndarray, t: int, schedule: NoiseSchedule, rng: np.random.Generator
) -> np.ndarray:
    """One-shot forward noising: z_t = z_0 + sqrt(cum_var(t)) * eps."""
    schedule._check_step(t)
    z0 = np.asarray(z0, dtype=float)
    if not np.all(np.isfinite(z0)):
        raise NumericError("z0 must be finite", step=t)
    return z0 + np.sqrt(schedule.cum_var(t)) * rng.standard_normal(z0.shape)


def analytic_score(
    model: GaussianMixtureModel,
    z: np.ndarray,
    t: int,
    c: np.ndarray | None,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Exact score of the t-step smoothed mixture (t=0 gives the data score).

    Equals the responsibility-weighted sum of -(z - mu_k(c)) / (sigma_k^2 +
    cum_var(t)) over components.
    """
    z_arr = np.atleast_2d(np.asarray(z, dtype=float))
    extra = schedule.cum_var(t) if t > 0 else 0.0
    mu = model.component_means(c)
    var = model._smoothed_vars(extra)
    diff = z_arr[:, None, :] - mu[None, :, :]
    k = model.dim
    log_comp = (
        -0.5 * np.sum(diff**2, axis=-1) / var
        - 0.5 * k * np.log(2.0 * np.pi * var)
        + np.log(model.weights)
    )
    log_comp -= _logsumexp(log_comp, axis=-1)[:, None]
    resp = np.exp(log_comp)  # (n, m)
    score = -np.einsum("nm,nmk->nk", resp / var, diff)
    return score if np.asarray(z).ndim > 1 else score[0]


def tweedie_denoise(
    z_t: np.ndarray, t: int, score_value: np.ndarray, schedule: NoiseSchedule
) -> np.ndarray:
    """Posterior-mean estimate of z_0: z_t + cum_var(t) * score; identity at t=0."""
    z_t = np.asarray(z_t, dtype=float)
    if t == 0:
        return z_t.copy()
    return z_t + schedule.cum_var(t) * np.asarray(score_value, dtype=float)


def _init_particles(
    n: int, dim: int, schedule: NoiseSchedule, rng: np.random.Generator
) -> np.ndarray:
    return np.sqrt(schedule.cum_var(schedule.T)) * rng.standard_normal((n, dim))


def reverse_step(
    z: np.ndarray,
    score_value: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """One reverse transition z_{t-1} ~ N(z_t + beta_t^2 s, beta_t^2 I)."""
    beta_t = schedule.beta_at(t)
    return z + beta_t**2 * score_value + beta_t * rng.standard_normal(z.shape)


def ancestral_sample(
    score: ScoreModel,
    c: np.ndarray | None,
    schedule: NoiseSchedule,
    n: int,
    rng: np.random.Generator,
    clip_bounds: tuple[float, float] | None = None,
) -> np.ndarray:
    """Draw n samples by running the full reverse process.

    Starts from N(0, cum_var(T) I) and applies T score-guided reverse steps.
    Only the final state is clipped to ``clip_bounds`` when given;
    intermediate states are unconstrained.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    z = _init_particles(n, score.dim, schedule, rng)
    for t in range(schedule.T, 0, -1):
        s = score.score(z, t, c, schedule)
        if not np.all(np.isfinite(s)):
            raise NumericError("score model produced non-finite values", step=t)
        z = reverse_step(z, s, t, schedule, rng)
    if clip_bounds is not None:
        z = np.clip(z, clip_bounds[0], clip_bounds[1])
    return z


# ---------------------------------------------------------------------------
# Trainable denoiser
# ---------------------------------------------------------------------------


def _he_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


@dataclass
class DenoiserNet:
    """Small fully connected noise predictor with score head.

    Input is the concatenation (z_t, t/T, c); the network predicts the noise
    eps that produced z_t from z_0, and the score is recovered as
    ``-eps_hat / sqrt(cum_var(t))``. Hidden layers use tanh.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dim: int
    context_dim: int

    @classmethod
    def init(
        cls,
        dim: int,
        context_dim: int,
        rng: np.random.Generator,
        hidden: int = 128,
        n_hidden: int = 3,
    ) -> "DenoiserNet":
        sizes = [dim + 1 + context_dim] + [hidden] * n_hidden + [dim]
        weights = [_he_init(rng, sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]
        biases = [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)]
        return cls(weights=weights, biases=biases, dim=dim, context_dim=context_dim)

    def _inputs(
        self, z: np.ndarray, t_frac: float | np.ndarray, c: np.ndarray | None
    ) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        t_col = np.broadcast_to(np.asarray(t_frac, dtype=float).reshape(-1, 1), (z.shape[0], 1))
        cols = [z, t_col]
        if self.context_dim:
            c_arr = np.asarray(c, dtype=float)
            if c_arr.ndim == 1:
                c_arr = np.broadcast_to(c_arr, (z.shape[0], self.context_dim))
            cols.append(c_arr)
        return np.concatenate(cols, axis=1)

    def predict_noise(
        self, z: np.ndarray, t_frac: float | np.ndarray, c: np.ndarray | None
    ) -> np.ndarray:
        h = self._inputs(z, t_frac, c)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
        return h @ self.weights[-1] + self.biases[-1]

    def score(
        self, z: np.ndarray, t: int, c: np.ndarray | None, schedule: NoiseSchedule
    ) -> np.ndarray:
        eps_hat = self.predict_noise(z, t / schedule.T, c)
        out = -eps_hat / np.sqrt(schedule.cum_var(max(t, 1)))
        return out if np.asarray(z).ndim > 1 else out[0]

    def _forward_cached(self, inputs: np.ndarray):
        acts = [inputs]
        h = inputs
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
            acts.append(h)
        out = h @ self.weights[-1] + self.biases[-1]
        return out, acts

    def _backward(self, acts, d_out):
        grads_w, grads_b = [], []
        delta = d_out
        for layer in range(len(self.weights) - 1, -1, -1):
            grads_w.append(acts[layer].T @ delta)
            grads_b.append(delta.sum(axis=0))
            if layer > 0:
                delta = (delta @ self.weights[layer].T) * (1.0 - acts[layer] ** 2)
        return grads_w[::-1], grads_b[::-1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 128

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("training hyperparameters must be positive")


def train_denoiser(
    dataset: list[tuple[np.ndarray, np.ndarray | None]],
    schedule: NoiseSchedule,
    hyper: TrainConfig,
    rng: np.random.Generator,
    net: DenoiserNet | None = None,
) -> tuple[DenoiserNet, list[float]]:
    """Fit the denoiser by noise-prediction MSE; returns (net, loss history).

    Each minibatch draws a uniform step t, noises z_0 one-shot, and regresses
    the injected noise. This is score matching up to the per-step weighting
    cum_var(t); the implied score target is -(z_t - z_0)/cum_var(t).
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    z0 = np.stack([np.asarray(z, dtype=float) for z, _ in dataset])
    first_c = dataset[0][1]
    context_dim = 0 if first_c is None else np.asarray(first_c).shape[0]
    if context_dim:
        ctx = np.stack([np.asarray(c, dtype=float) for _, c in dataset])
    else:
        ctx = None
    if net is None:
        net = DenoiserNet.init(z0.shape[1], context_dim, rng)

    adam_m = [np.zeros_like(w) for w in net.weights] + [np.zeros_like(b) for b in net.biases]
    adam_v = [np.zeros_like(p) for p in adam_m]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    losses: list[float] = []

    n = z0.shape[0]
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            batch_z0 = z0[idx]
            t = rng.integers(1, schedule.T + 1, size=batch_z0.shape[0])
            sd = np.sqrt(schedule.cum_var_array(t))[:, None]
            noise = rng.standard_normal(batch_z0.shape)
            z_t = batch_z0 + sd * noise
            inputs = net._inputs(z_t, t / schedule.T, ctx[idx] if context_dim else None)
            pred, acts = net._forward_cached(inputs)
            resid = pred - noise
            loss = float(np.mean(resid**2))
            if not np.isfinite(loss):
                raise TrainingError("loss diverged", epoch=epoch)
            epoch_loss += loss
            n_batches += 1
            d_out = 2.0 * resid / resid.size
            grads_w, grads_b = net._backward(acts, d_out)
            step += 1
            params = net.weights + net.biases
            grads = grads_w + grads_b
            for i, (p, g) in enumerate(zip(params, grads)):
                adam_m[i] = beta1 * adam_m[i] + (1 - beta1) * g
                adam_v[i] = beta2 * adam_v[i] + (1 - beta2) * g**2
                m_hat = adam_m[i] / (1 - beta1**step)
                v_hat = adam_v[i] / (1 - beta2**step)
                p -= hyper.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        losses.append(epoch_loss / max(n_batches, 1))
    return net, losses


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, net: DenoiserNet, schedule: NoiseSchedule) -> None:
    """Write net + schedule to JSON; parameter round trip is bit-exact."""
    payload = {
        "format": "diffpatrol-denoiser-v1",
        "schedule": {
            "T": schedule.T,
            "beta": schedule.beta,
            "variant": schedule.variant.value,
            "betas": None if schedule.betas is None else schedule.betas.tolist(),
        },
        "dim": net.dim,
        "context_dim": net.context_dim,
        "layer_sizes": [w.shape for w in net.weights],
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[DenoiserNet, NoiseSchedule]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "diffpatrol-denoiser-v1":
        raise ValueError(f"unrecognized checkpoint format in {path}")
    sched = payload["schedule"]
    schedule = NoiseSchedule(
        T=sched["T"],
        beta=sched["beta"],
        variant=ForwardVariant(sched["variant"]),
        betas=None if sched["betas"] is None else np.asarray(sched["betas"]),
    )
    net = DenoiserNet(
        weights=[np.asarray(w, dtype=float) for w in payload["weights"]],
        biases=[np.asarray(b, dtype=float) for b in payload["biases"]],
        dim=payload["dim"],
        context_dim=payload["context_dim"],
    )
    return net, schedule
