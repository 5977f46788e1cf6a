"""Double-oracle solver for the robust patrol game.

Each iteration: sample every adversary tilt into an empirical ensemble,
solve the restricted zero-sum subgame by LP, then expand both strategy sets
with best responses — mirror ascent for the defender, the closed-form
exponential tilt for the adversary. The loop stops when the oracle values
bracket the subgame value within 2*epsilon (and the iteration count clears
the confidence threshold), or at the iteration cap.

Two adversary backends are supported: the continuous diffusion samplers
(twisted SMC / importance sampling / posterior guidance) and a finite-grid
backend used for convergence tests where exact tilts and exact expected
utilities are computable.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .diffusion import GaussianMixtureModel, NoiseSchedule, ScoreModel
from .errors import ConfigError, GameSolveError, GridCoarseError
from .lp import solve_zero_sum
from .mirror import MirrorAscentConfig, mirror_ascent_budget
from .smc import (
    ParticleEnsemble,
    ProposalVariance,
    TiltSpec,
    dps_sample,
    importance_sampling,
    twisted_smc,
)
from .utility import (
    MixedDefenderStrategy,
    PatrolStrategy,
    expected_utility,
    mixed_utility,
)

__all__ = [
    "FixedSamples",
    "TheoreticalSamples",
    "DoubleOracleConfig",
    "PayoffMatrix",
    "SubgameEquilibrium",
    "DefenderSolution",
    "GridAdversary",
    "ContinuousAdversary",
    "sample_size_schedule",
    "solve_matrix_game",
    "defender_best_response",
    "adversary_best_response",
    "random_patrol",
    "double_oracle",
    "FiniteGameSpec",
    "EquivalenceResult",
    "equivalence_check_small_game",
    "save_solution",
    "load_solution",
]


@dataclass(frozen=True)
class FixedSamples:
    n: int = 500


@dataclass(frozen=True)
class TheoreticalSamples:
    """Per-iteration particle counts N_i = ceil(C M^2 (i+1)^2 i^(1+delta) / eps^2).

    ``c_const`` absorbs the sampler constant; ``m_bound`` is the utility
    upper bound M; ``delta`` any positive number (controls how fast the
    per-iteration failure probabilities become summable).
    """

    c_const: float = 16.0
    m_bound: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        if self.c_const <= 0 or self.m_bound <= 0 or self.delta <= 0:
            raise ConfigError("theoretical schedule constants must be positive")


@dataclass(frozen=True)
class DoubleOracleConfig:
    utility: object
    budget: float
    gamma: float
    epsilon: float = 0.05
    prob: float = 0.1
    max_iters: int = 30
    samples: FixedSamples | TheoreticalSamples = FixedSamples()
    ma: MirrorAscentConfig = MirrorAscentConfig()
    sampler: str = "smc"  # smc | is | dps
    proposal: ProposalVariance = ProposalVariance()
    clip_bounds: tuple[float, float] | None = None
    z_grid: np.ndarray | None = None  # finite adversary support (P, K)
    x_grid: np.ndarray | None = None  # finite defender strategies (n, K)
    exact_cells: bool = False  # grid backend: exact utilities, no sampling
    reuse_ensembles: bool = False  # cache prior ensembles instead of redrawing

    def __post_init__(self):
        if self.budget <= 0 or self.gamma < 0:
            raise ConfigError("budget must be positive and gamma non-negative")
        if self.epsilon <= 0 or not 0 < self.prob < 1 or self.max_iters < 1:
            raise ConfigError("invalid tolerance, probability, or iteration cap")
        if self.sampler not in ("smc", "is", "dps"):
            raise ConfigError(f"unknown sampler '{self.sampler}'")
        if self.exact_cells and self.z_grid is None:
            raise ConfigError("exact_cells requires a z_grid backend")


def sample_size_schedule(i: int, cfg: DoubleOracleConfig) -> int:
    """Particles per adversary distribution at iteration i (1-indexed)."""
    if i < 1:
        raise ConfigError("iteration index starts at 1")
    s = cfg.samples
    if isinstance(s, FixedSamples):
        return s.n
    raw = s.c_const * s.m_bound**2 * (i + 1) ** 2 * i ** (1.0 + s.delta) / cfg.epsilon**2
    return int(math.ceil(raw))


@dataclass
class PayoffMatrix:
    """Estimated utilities U(x_j, tau_hat_l) for the restricted subgame."""

    rows: list[PatrolStrategy]
    cols: list[ParticleEnsemble]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.rows), len(self.cols)):
            raise ValueError("payoff shape must be (rows, cols)")
        if not np.all(np.isfinite(self.values)):
            raise GameSolveError("payoff matrix contains non-finite entries")


@dataclass
class SubgameEquilibrium:
    pi_star: MixedDefenderStrategy
    sigma_star: np.ndarray
    value: float


def build_payoff(
    atoms: list[PatrolStrategy], ensembles: list[ParticleEnsemble], utility
) -> PayoffMatrix:
    values = np.empty((len(atoms), len(ensembles)))
    for l, ens in enumerate(ensembles):
        for j, atom in enumerate(atoms):
            values[j, l] = ens.expectation(utility.value(atom.x, ens.particles))
    return PayoffMatrix(rows=list(atoms), cols=list(ensembles), values=values)


def solve_matrix_game(payoff: PayoffMatrix) -> SubgameEquilibrium:
    pi, sigma, value = solve_zero_sum(payoff.values)
    mixed = MixedDefenderStrategy(atoms=tuple(payoff.rows), probs=pi)
    return SubgameEquilibrium(pi_star=mixed, sigma_star=sigma, value=value)


def random_patrol(budget: float, dim: int, rng: np.random.Generator) -> PatrolStrategy:
    """Uniform direction on the budget simplex, scaled by a uniform total."""
    direction = rng.dirichlet(np.ones(dim))
    total = budget * rng.uniform()
    return PatrolStrategy(x=total * direction, budget=budget)


def defender_best_response(
    ensembles: list[ParticleEnsemble],
    sigma: np.ndarray,
    utility,
    budget: float,
    ma_cfg: MirrorAscentConfig,
    x_grid: np.ndarray | None = None,
) -> PatrolStrategy:
    """Best patrol against a mixture of empirical adversary distributions.

    Continuous mode runs entropic mirror ascent from the uniform point and
    keeps the best visited iterate; grid mode takes an exact argmax over the
    candidate strategies.
    """
    sigma = np.asarray(sigma, dtype=float)
    active = [(s, e) for s, e in zip(sigma, ensembles) if s > 0]
    z_all = np.concatenate([e.particles for _, e in active])
    w_all = np.concatenate([s * e.weights for s, e in active])

    if x_grid is not None:
        vals = [float(w_all @ utility.value(x, z_all)) for x in x_grid]
        best = int(np.argmax(vals))
        return PatrolStrategy(x=np.asarray(x_grid[best], dtype=float), budget=budget)

    dim = z_all.shape[1]

    def objective(x: np.ndarray) -> float:
        return float(w_all @ utility.value(x, z_all))

    def grad(x: np.ndarray) -> np.ndarray:
        return w_all @ utility.grad_x(x, z_all)

    x_best = mirror_ascent_budget(grad, objective, dim, budget, ma_cfg)
    return PatrolStrategy(x=x_best, budget=budget)


def adversary_best_response(
    pi: MixedDefenderStrategy, gamma: float, utility
) -> TiltSpec:
    """Closed-form worst-case response: the gamma-tilt of the base model."""
    return TiltSpec(gamma=gamma, pi=pi, utility=utility)


# ---------------------------------------------------------------------------
# Adversary sampling backends
# ---------------------------------------------------------------------------


@dataclass
class ContinuousAdversary:
    """Draw tilted ensembles from a diffusion score model."""

    score: ScoreModel
    c: np.ndarray | None
    schedule: NoiseSchedule
    sampler: str = "smc"
    proposal: ProposalVariance = ProposalVariance()
    clip_bounds: tuple[float, float] | None = None

    def draw(self, tilt: TiltSpec, n: int, rng: np.random.Generator) -> ParticleEnsemble:
        if self.sampler == "smc":
            return twisted_smc(
                self.score, self.c, tilt, n, self.schedule,
                proposal=self.proposal, rng=rng, clip_bounds=self.clip_bounds,
            )
        if self.sampler == "is":
            return importance_sampling(
                self.score, self.c, tilt, n, self.schedule, rng,
                clip_bounds=self.clip_bounds,
            )
        if self.sampler == "dps":
            return dps_sample(
                self.score, self.c, tilt, n, self.schedule, rng,
                clip_bounds=self.clip_bounds,
            )
        raise ConfigError(f"unknown sampler '{self.sampler}'")


@dataclass
class GridAdversary:
    """Finite-support adversary with exact tilts (for convergence tests).

    The base model is restricted to ``points`` and renormalized; tilt
    distributions and expected utilities are then exact, and sampling is a
    plain multinomial draw.
    """

    points: np.ndarray  # (P, K)
    log_base: np.ndarray  # (P,), normalized
    exact: bool = False

    @classmethod
    def from_model(
        cls,
        model: GaussianMixtureModel,
        c: np.ndarray | None,
        points: np.ndarray,
        exact: bool = False,
    ) -> "GridAdversary":
        log_p = model.log_density(points, c)
        log_p = log_p - _logsumexp(log_p)
        return cls(points=np.asarray(points, dtype=float), log_base=log_p, exact=exact)

    def tilt_log_probs(self, tilt: TiltSpec) -> np.ndarray:
        logits = self.log_base - tilt.gamma * tilt.tilt_utility(self.points)
        return logits - _logsumexp(logits)

    def draw(self, tilt: TiltSpec, n: int, rng: np.random.Generator) -> ParticleEnsemble:
        probs = np.exp(self.tilt_log_probs(tilt))
        if self.exact:
            return ParticleEnsemble(self.points, probs, normalized=True)
        idx = rng.choice(self.points.shape[0], size=n, p=probs)
        return ParticleEnsemble.uniform(self.points[idx])


def _logsumexp(a: np.ndarray) -> float:
    m = float(np.max(a))
    return m + float(np.log(np.sum(np.exp(a - m))))


# ---------------------------------------------------------------------------
# The double-oracle loop
# ---------------------------------------------------------------------------


@dataclass
class DefenderSolution:
    """Final mixed strategy plus the full iteration history for replay."""

    pi_star: MixedDefenderStrategy
    value: float
    iterations: int
    gap_history: list[float]
    lower_history: list[float]
    upper_history: list[float]
    subgame_values: list[float]
    defender_atoms: list[np.ndarray]  # ordered; strategy set at iter i = first i+1
    terminated_by: str
    sample_counts: list[int]
    config_echo: dict = field(default_factory=dict)
    seed_info: dict = field(default_factory=dict)


def double_oracle(
    score,
    c: np.ndarray | None,
    cfg: DoubleOracleConfig,
    rng: np.random.Generator,
    schedule: NoiseSchedule | None = None,
) -> DefenderSolution:
    """Run the double-oracle loop and return the robust mixed strategy.

    ``schedule`` is required for the continuous sampler backends and ignored
    by the grid backend. The initial strategies are a random patrol and the
    untilted base model; the returned ``pi_star`` is the equilibrium of the
    last solved subgame.
    """
    utility = cfg.utility
    if cfg.z_grid is not None:
        if not isinstance(score, GaussianMixtureModel):
            raise ConfigError("grid backend needs an analytic mixture model")
        adversary = GridAdversary.from_model(score, c, cfg.z_grid, exact=cfg.exact_cells)
        dim = cfg.z_grid.shape[1]
    else:
        if schedule is None:
            raise ConfigError("continuous backend requires a noise schedule")
        adversary = ContinuousAdversary(
            score=score, c=c, schedule=schedule, sampler=cfg.sampler,
            proposal=cfg.proposal, clip_bounds=cfg.clip_bounds,
        )
        dim = score.dim

    if cfg.x_grid is not None:
        init_idx = int(rng.integers(cfg.x_grid.shape[0]))
        x0 = PatrolStrategy(x=np.asarray(cfg.x_grid[init_idx], dtype=float), budget=cfg.budget)
    else:
        x0 = random_patrol(cfg.budget, dim, rng)

    atoms: list[PatrolStrategy] = [x0]
    tilts: list[TiltSpec] = [
        TiltSpec(gamma=0.0, pi=MixedDefenderStrategy.point_mass(x0), utility=utility)
    ]
    cached: list[ParticleEnsemble] = []

    gap_hist: list[float] = []
    lower_hist: list[float] = []
    upper_hist: list[float] = []
    value_hist: list[float] = []
    count_hist: list[int] = []
    terminated_by = "cap"
    pi_star = MixedDefenderStrategy.point_mass(x0)
    value = float("nan")

    iterations = 0
    for i in range(1, cfg.max_iters + 1):
        iterations = i
        n_i = sample_size_schedule(i, cfg)
        count_hist.append(n_i)
        streams = rng.spawn(len(tilts) + 1)
        if cfg.reuse_ensembles and cached:
            ensembles = cached + [adversary.draw(tilts[-1], n_i, streams[len(cached)])]
        else:
            ensembles = [adversary.draw(tilt, n_i, streams[k]) for k, tilt in enumerate(tilts)]

        payoff = build_payoff(atoms, ensembles, utility)
        eq = solve_matrix_game(payoff)
        pi_star, sigma_star, value = eq.pi_star, eq.sigma_star, eq.value
        value_hist.append(value)

        x_new = defender_best_response(
            ensembles, sigma_star, utility, cfg.budget, cfg.ma, x_grid=cfg.x_grid
        )
        tilt_new = adversary_best_response(pi_star, cfg.gamma, utility)
        atoms.append(x_new)
        tilts.append(tilt_new)

        ens_new = adversary.draw(tilt_new, n_i, streams[-1])
        v_lower = expected_utility(pi_star, [ens_new], np.array([1.0]), utility)
        v_upper = expected_utility(
            MixedDefenderStrategy.point_mass(x_new), ensembles, sigma_star, utility
        )
        gap = v_upper - v_lower
        lower_hist.append(v_lower)
        upper_hist.append(v_upper)
        gap_hist.append(gap)
        cached = ensembles

        if -2.0 * cfg.epsilon < gap < 2.0 * cfg.epsilon and i > 1.0 / (16.0 * cfg.prob):
            terminated_by = "predicate"
            break

    return DefenderSolution(
        pi_star=pi_star,
        value=value,
        iterations=iterations,
        gap_history=gap_hist,
        lower_history=lower_hist,
        upper_history=upper_hist,
        subgame_values=value_hist,
        defender_atoms=[a.x.copy() for a in atoms],
        terminated_by=terminated_by,
        sample_counts=count_hist,
        config_echo=_config_echo(cfg),
    )


def _config_echo(cfg: DoubleOracleConfig) -> dict:
    echo = {
        "budget": cfg.budget,
        "gamma": cfg.gamma,
        "epsilon": cfg.epsilon,
        "prob": cfg.prob,
        "max_iters": cfg.max_iters,
        "sampler": cfg.sampler,
        "exact_cells": cfg.exact_cells,
        "ma_step_size": cfg.ma.step_size,
        "ma_iterations": cfg.ma.iterations,
    }
    if isinstance(cfg.samples, FixedSamples):
        echo["samples"] = {"mode": "fixed", "n": cfg.samples.n}
    else:
        echo["samples"] = {
            "mode": "theoretical",
            "c_const": cfg.samples.c_const,
            "m_bound": cfg.samples.m_bound,
            "delta": cfg.samples.delta,
        }
    return echo


def save_solution(path: str, sol: DefenderSolution, seed_info: dict | None = None) -> None:
    payload = {
        "format": "diffpatrol-solution-v1",
        "atoms": [a.x.tolist() for a in sol.pi_star.atoms],
        "probs": sol.pi_star.probs.tolist(),
        "budget": sol.pi_star.atoms[0].budget,
        "value": sol.value,
        "iterations": sol.iterations,
        "gap_history": sol.gap_history,
        "lower_history": sol.lower_history,
        "upper_history": sol.upper_history,
        "subgame_values": sol.subgame_values,
        "defender_atoms": [a.tolist() for a in sol.defender_atoms],
        "terminated_by": sol.terminated_by,
        "sample_counts": sol.sample_counts,
        "config": sol.config_echo,
        "seed_info": seed_info or sol.seed_info,
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=1)
    os.replace(tmp, path)


def load_solution(path: str) -> DefenderSolution:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "diffpatrol-solution-v1":
        raise ValueError(f"unrecognized solution format in {path}")
    budget = payload["budget"]
    atoms = tuple(
        PatrolStrategy(x=np.asarray(a, dtype=float), budget=budget)
        for a in payload["atoms"]
    )
    pi = MixedDefenderStrategy(atoms=atoms, probs=np.asarray(payload["probs"]))
    return DefenderSolution(
        pi_star=pi,
        value=payload["value"],
        iterations=payload["iterations"],
        gap_history=payload["gap_history"],
        lower_history=payload["lower_history"],
        upper_history=payload["upper_history"],
        subgame_values=payload["subgame_values"],
        defender_atoms=[np.asarray(a, dtype=float) for a in payload["defender_atoms"]],
        terminated_by=payload["terminated_by"],
        sample_counts=payload["sample_counts"],
        config_echo=payload.get("config", {}),
        seed_info=payload.get("seed_info", {}),
    )


# ---------------------------------------------------------------------------
# Brute-force equivalence check on tiny finite games
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FiniteGameSpec:
    """A finite robust game: payoffs u(x_j, z_k), base law over z, KL radius."""

    payoffs: np.ndarray  # (n_x, n_z)
    base_probs: np.ndarray  # (n_z,)
    rho: float
    pi_grid: int = 400
    tau_grid: int = 400

    def __post_init__(self):
        payoffs = np.asarray(self.payoffs, dtype=float)
        base = np.asarray(self.base_probs, dtype=float)
        if payoffs.ndim != 2 or payoffs.shape[1] != base.shape[0]:
            raise ValueError("payoffs must be (n_x, n_z) matching base_probs")
        if payoffs.shape[1] > 4:
            raise ValueError("brute-force check supports |Z| <= 4")
        if np.any(base <= 0) or abs(float(base.sum()) - 1.0) > 1e-12:
            raise ValueError("base_probs must be strictly positive and sum to 1")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        object.__setattr__(self, "payoffs", payoffs)
        object.__setattr__(self, "base_probs", base)


@dataclass(frozen=True)
class EquivalenceResult:
    value_direct: float  # brute-force max-min over the KL ball (pure tau)
    value_mixtures: float  # LP value with ball elements as pure strategies


def _simplex_lattice(k: int, resolution: int) -> np.ndarray:
    """All points of the k-simplex with coordinates that are multiples of 1/resolution."""
    pts = []
    for cuts in itertools.combinations(range(resolution + k - 1), k - 1):
        prev = -1
        counts = []
        for cut in cuts:
            counts.append(cut - prev - 1)
            prev = cut
        counts.append(resolution + k - 2 - prev)
        pts.append(counts)
    return np.asarray(pts, dtype=float) / resolution


def _lattice_resolution(k: int, target_points: int) -> int:
    if k == 1:
        return 1
    if k == 2:
        return max(target_points - 1, 1)
    # (m+1)(m+2)/2 points for k=3, C(m+3,3) for k=4
    m = 2
    while math.comb(m + k - 1, k - 1) < target_points:
        m += 1
    return m


def _kl_to_base(taus: np.ndarray, base: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(taus > 0, taus * (np.log(taus) - np.log(base)), 0.0)
    return terms.sum(axis=1)


def _equivalence_values(spec: FiniteGameSpec, pi_points: int, tau_points: int):
    u = spec.payoffs
    n_x, n_z = u.shape

    tau_res = _lattice_resolution(n_z, tau_points)
    taus = _simplex_lattice(n_z, tau_res)
    in_ball = _kl_to_base(taus, spec.base_probs) <= spec.rho + 1e-12
    taus = np.vstack([taus[in_ball], spec.base_probs])  # base always feasible

    payoff_vs_tau = u @ taus.T  # (n_x, n_tau)

    pi_res = _lattice_resolution(n_x, pi_points)
    pis = _simplex_lattice(n_x, pi_res)
    # direct form: each candidate pi plays against the worst single ball element
    value_direct = float(np.max(np.min(pis @ payoff_vs_tau, axis=1)))
    # mixture form: ball elements are pure strategies of a finite matrix game
    _, _, value_mixtures = solve_zero_sum(payoff_vs_tau)
    return value_direct, value_mixtures


def equivalence_check_small_game(spec: FiniteGameSpec) -> EquivalenceResult:
    """Brute-force both formulations of the robust game and return the values.

    The direct route restricts the adversary to pure ball elements on a
    simplex grid; the mixture route lets the adversary mix over the same
    elements via the matrix-game LP. Raises GridCoarseError when doubling
    both grids moves either value by more than 1e-3.
    """
    v1, v2 = _equivalence_values(spec, spec.pi_grid, spec.tau_grid)
    v1_fine, v2_fine = _equivalence_values(spec, spec.pi_grid * 2, spec.tau_grid * 2)
    if abs(v1 - v1_fine) > 1e-3 or abs(v2 - v2_fine) > 1e-3:
        raise GridCoarseError(
            f"refinement moved values by {abs(v1 - v1_fine):.2e} / {abs(v2 - v2_fine):.2e}"
        )
    return EquivalenceResult(value_direct=v1, value_mixtures=v2)
