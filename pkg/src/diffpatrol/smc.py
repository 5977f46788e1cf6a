"""Sampling from tilted adversary distributions.

The adversary's best response reweights the generative model by the
defender's utility:

    tau(z) proportional to p(z | c) * exp(-gamma * U(pi, z)).

``twisted_smc`` samples this target exactly in the particle limit by running
the reverse diffusion with twisting functions

    Phi_t(z_t) = exp(-gamma * U(pi, zhat0(z_t)))

(zhat0 from Tweedie denoising), adjusting the proposal score by the twisting
gradient, and correcting with importance weights. ``importance_sampling``
and ``dps_sample`` are the weaker baselines: plain reweighting of base-model
draws, and guided propagation without any weight correction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, ScoreModel, _init_particles, tweedie_denoise
from .errors import DegeneracyError, NumericError
from .utility import MixedDefenderStrategy, mixed_utility, mixed_utility_grad_z

__all__ = [
    "TiltSpec",
    "ParticleEnsemble",
    "ProposalVariance",
    "SmcTrace",
    "twisting_value",
    "twisted_smc",
    "multinomial_resample",
    "ess",
    "importance_sampling",
    "dps_sample",
]


@dataclass(frozen=True)
class TiltSpec:
    """Symbolic adversary pure strategy: the gamma-tilt of the base model.

    ``utility`` is any object with ``value(x, z)`` / ``grad_z(x, z)``
    broadcasting over leading z axes (UtilityParams or LinearUtility).
    """

    gamma: float
    pi: MixedDefenderStrategy
    utility: object

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")

    def tilt_utility(self, z: np.ndarray) -> np.ndarray:
        """U(pi, z) batched over leading z axes."""
        return mixed_utility(self.pi, z, self.utility)

    def tilt_utility_grad(self, z: np.ndarray) -> np.ndarray:
        return mixed_utility_grad_z(self.pi, z, self.utility)


@dataclass
class ParticleEnsemble:
    """Weighted particles representing an empirical adversary distribution."""

    particles: np.ndarray  # (N, K)
    weights: np.ndarray  # (N,)
    normalized: bool = True

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        n = self.particles.shape[0]
        if n < 1 or self.weights.shape != (n,):
            raise ValueError("weights must match particle count")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be finite and non-negative")
        if not np.any(self.weights > 0):
            raise DegeneracyError("all particle weights are zero")
        if self.normalized and abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValueError("normalized ensemble weights must sum to 1")

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    def require_normalized(self) -> None:
        if not self.normalized:
            raise ValueError("ensemble must be normalized here")

    def normalize(self) -> "ParticleEnsemble":
        total = float(self.weights.sum())
        return ParticleEnsemble(self.particles, self.weights / total, normalized=True)

    def expectation(self, values: np.ndarray) -> float:
        self.require_normalized()
        return float(self.weights @ np.asarray(values, dtype=float))

    def mean(self) -> np.ndarray:
        self.require_normalized()
        return self.weights @ self.particles

    @classmethod
    def uniform(cls, particles: np.ndarray) -> "ParticleEnsemble":
        particles = np.atleast_2d(np.asarray(particles, dtype=float))
        n = particles.shape[0]
        return cls(particles, np.full(n, 1.0 / n), normalized=True)

    def to_csv(self, path: str) -> None:
        """Dump as particle_index, weight, z_1..z_K (full float precision)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["particle_index", "weight"] + [f"z_{k + 1}" for k in range(self.dim)]
            )
            for i in range(self.n):
                writer.writerow(
                    [i, repr(float(self.weights[i]))]
                    + [repr(float(v)) for v in self.particles[i]]
                )

    @classmethod
    def from_csv(cls, path: str) -> "ParticleEnsemble":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        weights = np.array([float(r[1]) for r in rows[1:]])
        particles = np.array([[float(v) for v in r[2:]] for r in rows[1:]])
        return cls(particles, weights, normalized=abs(weights.sum() - 1.0) <= 1e-9)


@dataclass(frozen=True)
class ProposalVariance:
    """Reverse-proposal variance; must exceed the base beta_t^2.

    Either an absolute ``beta_hat_sq`` or a multiplicative ``factor`` applied
    per step. The strict inequality keeps the Gaussian weight ratios bounded.
    """

    beta_hat_sq: float | None = None
    factor: float = 1.5

    def __post_init__(self):
        if self.beta_hat_sq is None and self.factor <= 1.0:
            raise ValueError("proposal factor must exceed 1")

    def at(self, schedule: NoiseSchedule, t: int) -> float:
        base = schedule.beta_at(t) ** 2
        if self.beta_hat_sq is not None:
            if self.beta_hat_sq <= base:
                raise ValueError(
                    f"proposal variance {self.beta_hat_sq} must exceed beta_t^2={base}"
                )
            return self.beta_hat_sq
        return self.factor * base


@dataclass
class SmcTrace:
    """Per-step arrays recorded by twisted_smc for weight-identity audits."""

    steps: list[dict] = field(default_factory=list)


def twisting_value(
    tilt: TiltSpec,
    z_t: np.ndarray,
    t: int,
    score: ScoreModel,
    schedule: NoiseSchedule,
    c: np.ndarray | None = None,
) -> float:
    """Phi_t(z_t): strictly positive, and <= 1 whenever U >= 0."""
    z_arr = np.atleast_2d(np.asarray(z_t, dtype=float))
    if t == 0:
        zhat0 = z_arr
    else:
        s = score.score(z_arr, t, c, schedule)
        zhat0 = tweedie_denoise(z_arr, t, s, schedule)
    u = tilt.tilt_utility(zhat0)
    if not np.all(np.isfinite(u)):
        raise NumericError("utility non-finite inside twisting function", step=t)
    value = np.exp(-tilt.gamma * u)
    return float(value[0]) if np.asarray(z_t).ndim == 1 else value


def ess(ensemble: ParticleEnsemble) -> float:
    """Effective sample size 1 / sum(w^2); lies in [1, N]."""
    ensemble.require_normalized()
    return float(1.0 / np.sum(ensemble.weights**2))


def multinomial_resample(
    ensemble: ParticleEnsemble, rng: np.random.Generator
) -> ParticleEnsemble:
    """Draw N particles i.i.d. proportional to weights; output weights 1/N."""
    w = ensemble.weights
    total = float(w.sum())
    if total <= 0:
        raise DegeneracyError("cannot resample a zero-weight ensemble")
    idx = rng.choice(ensemble.n, size=ensemble.n, p=w / total)
    return ParticleEnsemble.uniform(ensemble.particles[idx])


def _normalize_log_weights(logw: np.ndarray, step: int) -> np.ndarray:
    finite = np.isfinite(logw)
    if not np.any(finite):
        raise DegeneracyError("all particle weights underflowed", step=step)
    m = np.max(logw[finite])
    w = np.exp(np.where(finite, logw - m, -np.inf))
    return w / w.sum()


def _gauss_logpdf(x: np.ndarray, mean: np.ndarray, var: float) -> np.ndarray:
    diff = x - mean
    k = x.shape[-1]
    return -0.5 * np.sum(diff**2, axis=-1) / var - 0.5 * k * np.log(2.0 * np.pi * var)


def twisted_smc(
    score: ScoreModel,
    c: np.ndarray | None,
    tilt: TiltSpec,
    n_particles: int,
    schedule: NoiseSchedule,
    proposal: ProposalVariance | None = None,
    rng: np.random.Generator | None = None,
    clip_bounds: tuple[float, float] | None = None,
    resample_threshold: float | None = None,
    trace: SmcTrace | None = None,
) -> ParticleEnsemble:
    """Twisted sequential Monte Carlo targeting the gamma-tilted model law.

    Particles start at the terminal Gaussian weighted by Phi_T, then for each
    reverse step: multinomial resampling (unconditional by default; set
    ``resample_threshold`` to resample only when ESS drops below
    ``threshold * N``), propagation with the twist-adjusted score under the
    inflated proposal variance, and reweighting by

        w = p(z_{t-1} | z_t, c) Phi_{t-1}(z_{t-1})
            / (phat(z_{t-1} | z_t, c) Phi_t(z_t)).

    The twisting gradient uses the stop-gradient form -gamma * grad U at the
    denoised point; the weight correction keeps the final law exact anyway.
    """
    if n_particles < 2:
        raise ValueError("need at least 2 particles")
    if proposal is None:
        proposal = ProposalVariance()
    if rng is None:
        raise ValueError("an explicit rng is required")
    gamma = tilt.gamma

    z = _init_particles(n_particles, score.dim, schedule, rng)
    s_cur = score.score(z, schedule.T, c, schedule)
    zhat0 = tweedie_denoise(z, schedule.T, s_cur, schedule)
    log_phi_cur = -gamma * tilt.tilt_utility(zhat0)
    logw = log_phi_cur.copy()

    for t in range(schedule.T, 0, -1):
        w_norm = _normalize_log_weights(logw, step=t)
        do_resample = True
        if resample_threshold is not None:
            do_resample = 1.0 / np.sum(w_norm**2) < resample_threshold * n_particles
        if do_resample:
            idx = rng.choice(n_particles, size=n_particles, p=w_norm)
            z, s_cur, log_phi_cur = z[idx], s_cur[idx], log_phi_cur[idx]
            zhat0 = zhat0[idx]
            logw = np.zeros(n_particles)
        # twist-adjusted proposal
        grad_term = -gamma * tilt.tilt_utility_grad(zhat0)
        s_adj = s_cur + grad_term
        beta_sq = schedule.beta_at(t) ** 2
        beta_hat_sq = proposal.at(schedule, t)
        mean_prop = z + beta_hat_sq * s_adj
        z_new = mean_prop + np.sqrt(beta_hat_sq) * rng.standard_normal(z.shape)
        if not np.all(np.isfinite(z_new)):
            raise NumericError("particle propagation produced non-finite values", step=t)
        mean_base = z + beta_sq * s_cur
        log_p = _gauss_logpdf(z_new, mean_base, beta_sq)
        log_q = _gauss_logpdf(z_new, mean_prop, beta_hat_sq)
        if t - 1 == 0:
            s_new = None
            zhat0_new = z_new
        else:
            s_new = score.score(z_new, t - 1, c, schedule)
            if not np.all(np.isfinite(s_new)):
                raise NumericError("score model produced non-finite values", step=t - 1)
            zhat0_new = tweedie_denoise(z_new, t - 1, s_new, schedule)
        log_phi_new = -gamma * tilt.tilt_utility(zhat0_new)
        increment = log_p + log_phi_new - log_q - log_phi_cur
        if trace is not None:
            trace.steps.append(
                {
                    "t": t,
                    "z_t": z.copy(),
                    "z_prev": z_new.copy(),
                    "score_t": s_cur.copy(),
                    "score_adj": s_adj.copy(),
                    "log_phi_t": log_phi_cur.copy(),
                    "log_phi_prev": log_phi_new.copy(),
                    "beta_sq": beta_sq,
                    "beta_hat_sq": beta_hat_sq,
                    "log_increment": increment.copy(),
                    "resampled": do_resample,
                }
            )
        logw = logw + increment
        z, s_cur, log_phi_cur, zhat0 = z_new, s_new, log_phi_new, zhat0_new

    weights = _normalize_log_weights(logw, step=0)
    if clip_bounds is not None:
        z = np.clip(z, clip_bounds[0], clip_bounds[1])
    return ParticleEnsemble(z, weights, normalized=True)


def importance_sampling(
    score: ScoreModel,
    c: np.ndarray | None,
    tilt: TiltSpec,
    n_particles: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    clip_bounds: tuple[float, float] | None = None,
) -> ParticleEnsemble:
    """Self-normalized importance sampling with the base model as proposal.

    Draws ancestral samples and weights them by exp(-gamma U(pi, z)).
    """
    from .diffusion import ancestral_sample

    if n_particles < 2:
        raise ValueError("need at least 2 particles")
    z = ancestral_sample(score, c, schedule, n_particles, rng, clip_bounds=clip_bounds)
    logw = -tilt.gamma * tilt.tilt_utility(z)
    weights = _normalize_log_weights(logw, step=0)
    return ParticleEnsemble(z, weights, normalized=True)


def dps_sample(
    score: ScoreModel,
    c: np.ndarray | None,
    tilt: TiltSpec,
    n_particles: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    clip_bounds: tuple[float, float] | None = None,
) -> ParticleEnsemble:
    """Posterior-guided propagation without weights (approximate sampler).

    Runs the reverse process with the twist-adjusted score and base step
    variance; no resampling or reweighting, so the result is biased for
    gamma > 0 (it need not converge to the tilted target). At gamma = 0 it
    consumes the RNG identically to ancestral sampling.
    """
    if n_particles < 2:
        raise ValueError("need at least 2 particles")
    z = _init_particles(n_particles, score.dim, schedule, rng)
    for t in range(schedule.T, 0, -1):
        s = score.score(z, t, c, schedule)
        if not np.all(np.isfinite(s)):
            raise NumericError("score model produced non-finite values", step=t)
        zhat0 = tweedie_denoise(z, t, s, schedule)
        s_adj = s - tilt.gamma * tilt.tilt_utility_grad(zhat0)
        beta_t = schedule.beta_at(t)
        z = z + beta_t**2 * s_adj + beta_t * rng.standard_normal(z.shape)
        if not np.all(np.isfinite(z)):
            raise NumericError("guided propagation produced non-finite values", step=t)
    if clip_bounds is not None:
        z = np.clip(z, clip_bounds[0], clip_bounds[1])
    return ParticleEnsemble.uniform(z)
