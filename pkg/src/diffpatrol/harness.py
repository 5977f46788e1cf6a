"""Configuration-driven experiment runner.

Runs the robust solver and its baselines over a set of test instances and
seeds, evaluates decision regret against a known truth distribution, and
writes deterministic CSV/JSON artifacts. Jobs are independent; their RNG
streams are derived from (seed, method, instance), so serial and parallel
executions produce byte-identical outputs.

Truth models for regret:
  * analytic testbed — the base mixture tilted at ``gamma_test`` toward the
    worst case for a reference (uniform full-budget) patrol, evaluated by
    grid quadrature;
  * dataset testbed — fresh draws from the synthetic generator's
    conditional law (Monte Carlo, standard error reported).
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__ as _pkg_version
from .diffusion import GaussianMixtureModel, NoiseSchedule, load_checkpoint
from .errors import ConfigError
from .game import (
    DoubleOracleConfig,
    FixedSamples,
    double_oracle,
    random_patrol,
    save_solution,
)
from .mirror import MirrorAscentConfig, mirror_ascent_budget
from .rngs import derive_rng
from .smc import ParticleEnsemble, TiltSpec, twisted_smc
from .utility import MixedDefenderStrategy, PatrolStrategy, UtilityParams

__all__ = [
    "ExperimentConfig",
    "RegretRow",
    "RegretReport",
    "AnalyticTestbed",
    "nro_solve",
    "aor_solve",
    "solve_one",
    "evaluate_regret_analytic",
    "run_experiment",
    "parse_config",
    "load_config",
]

_METHODS = ("nro", "aor", "do-smc", "do-is", "do-dps")

_ENV_OUTPUT_ROOT = "DIFFPATROL_OUTPUT_ROOT"


@dataclass(frozen=True)
class ExperimentConfig:
    testbed: str = "analytic"  # "analytic" or "dataset:<path>"
    model: str = "analytic"  # "analytic" or path to a denoiser checkpoint
    methods: tuple[str, ...] = ("nro", "do-smc")
    budget: float = 2.0
    gamma: float = 2.0
    gamma_test: tuple[float, ...] = (1.0,)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_contexts: int = 10
    n_particles: int = 500
    schedule_t: int = 60
    epsilon: float = 0.02
    prob: float = 0.1
    max_iters: int = 8
    ma_step: float = 0.1
    ma_iters: int = 300
    aor_rounds: int = 5
    n_restarts: int = 5
    eval_grid_points: int = 101
    eval_draws: int = 100000
    output_dir: str = "runs/experiment"
    workers: int = 1
    context_seed: int = 1234

    def __post_init__(self):
        for m in self.methods:
            if m not in _METHODS:
                raise ConfigError(f"unknown method '{m}' (choose from {_METHODS})")
        if self.budget <= 0 or self.gamma < 0 or self.n_particles < 2:
            raise ConfigError("invalid budget, gamma, or particle count")
        if any(g < 0 for g in self.gamma_test):
            raise ConfigError("gamma_test values must be non-negative")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    def resolved_output_dir(self) -> str:
        root = os.environ.get(_ENV_OUTPUT_ROOT)
        if root and not os.path.isabs(self.output_dir):
            return os.path.join(root, self.output_dir)
        return self.output_dir


_SCHEMA: dict[str, tuple] = {
    "testbed": (str, None),
    "model": (str, None),
    "methods": (str, "list"),
    "budget": (float, None),
    "gamma": (float, None),
    "gamma_test": (float, "list"),
    "seeds": (int, "list"),
    "n_contexts": (int, None),
    "n_particles": (int, None),
    "schedule_t": (int, None),
    "epsilon": (float, None),
    "prob": (float, None),
    "max_iters": (int, None),
    "ma_step": (float, None),
    "ma_iters": (int, None),
    "aor_rounds": (int, None),
    "n_restarts": (int, None),
    "eval_grid_points": (int, None),
    "eval_draws": (int, None),
    "output_dir": (str, None),
    "workers": (int, None),
    "context_seed": (int, None),
}


def parse_config(text: str) -> ExperimentConfig:
    """Parse the flat ``key = value`` experiment config format.

    Comma-separated values for list keys; '#' starts a comment.
    """
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        typ, mode = _SCHEMA[key]
        try:
            if mode == "list":
                parsed = tuple(typ(v.strip()) for v in val.split(",") if v.strip())
            else:
                parsed = typ(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {val}") from exc
        values[key] = parsed
    return ExperimentConfig(**values)


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# Analytic testbed
# ---------------------------------------------------------------------------


@dataclass
class AnalyticTestbed:
    """Two-region bimodal adversary whose modes shift with prior patrol."""

    model: GaussianMixtureModel
    schedule: NoiseSchedule
    params: UtilityParams
    budget: float
    contexts: list[np.ndarray]
    z_lo: float = 0.0
    z_hi: float = 8.0

    @classmethod
    def build(cls, cfg: ExperimentConfig) -> "AnalyticTestbed":
        model = GaussianMixtureModel(
            weights=np.array([0.5, 0.5]),
            means=np.array([[1.5, 4.5], [4.5, 1.5]]),
            stddevs=np.array([0.9, 0.9]),
            context_maps=np.array(
                [[[-0.6, 0.0], [0.0, -0.6]], [[-0.6, 0.0], [0.0, -0.6]]]
            ),
        )
        data_var = 3.0  # rough spread of the mixture, sets the terminal noise
        schedule = NoiseSchedule(
            T=cfg.schedule_t, beta=float(np.sqrt(4.0 * data_var / cfg.schedule_t))
        )
        params = UtilityParams(
            n0=np.ones(2), r=0.1, alpha=0.3, psi=0.5, theta=1.0, clip=True
        )
        ctx_rng = derive_rng(cfg.context_seed, "contexts")
        contexts = [
            ctx_rng.uniform(0.0, cfg.budget, size=2) for _ in range(cfg.n_contexts)
        ]
        return cls(
            model=model,
            schedule=schedule,
            params=params,
            budget=cfg.budget,
            contexts=contexts,
        )

    def reference_patrol(self) -> PatrolStrategy:
        return PatrolStrategy(x=np.full(2, self.budget / 2.0), budget=self.budget)

    def truth_log_probs(
        self, c: np.ndarray, gamma_test: float, grid: np.ndarray
    ) -> np.ndarray:
        """Grid log-probabilities of the tilted test-time distribution."""
        ref = MixedDefenderStrategy.point_mass(self.reference_patrol())
        tilt = TiltSpec(gamma=gamma_test, pi=ref, utility=self.params)
        logits = self.model.log_density(grid, c) - gamma_test * tilt.tilt_utility(grid)
        m = logits.max()
        return logits - (m + np.log(np.exp(logits - m).sum()))

    def eval_grid(self, points: int) -> np.ndarray:
        g = np.linspace(self.z_lo, self.z_hi, points)
        return np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)

    def budget_line(self, points: int = 401) -> np.ndarray:
        a = np.linspace(0.0, self.budget, points)
        return np.stack([a, self.budget - a], axis=1)


def evaluate_regret_analytic(
    pi: MixedDefenderStrategy,
    testbed: AnalyticTestbed,
    c: np.ndarray,
    gamma_test: float,
    grid_points: int = 101,
    best_value: float | None = None,
) -> dict:
    """Quadrature regret of ``pi`` under the tilted truth for one context.

    The best-response search runs over the full-budget line (utility is
    non-decreasing in patrol effort) plus the atoms of ``pi`` itself, which
    keeps regret non-negative up to quadrature round-off.
    """
    grid = testbed.eval_grid(grid_points)
    logw = testbed.truth_log_probs(c, gamma_test, grid)
    w = np.exp(logw)

    def truth_value(x: np.ndarray) -> float:
        return float(w @ testbed.params.value(x, grid))

    if best_value is None:
        best_value = max(truth_value(x) for x in testbed.budget_line())
    best = max(best_value, max(truth_value(a.x) for a in pi.atoms))
    achieved = float(
        sum(p * truth_value(a.x) for p, a in zip(pi.probs, pi.atoms))
    )
    return {"best": best, "achieved": achieved, "regret": best - achieved}


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def _saa_best_response(
    ensemble: ParticleEnsemble,
    params,
    budget: float,
    ma: MirrorAscentConfig,
    x0: np.ndarray,
) -> PatrolStrategy:
    z, w = ensemble.particles, ensemble.weights

    def objective(x):
        return float(w @ params.value(x, z))

    def grad(x):
        return w @ params.grad_x(x, z)

    return PatrolStrategy(
        x=mirror_ascent_budget(grad, objective, z.shape[1], budget, ma, x0=x0),
        budget=budget,
    )


def nro_solve(
    score,
    c: np.ndarray | None,
    schedule: NoiseSchedule,
    params,
    budget: float,
    n_particles: int,
    rng: np.random.Generator,
    ma: MirrorAscentConfig = MirrorAscentConfig(),
    n_restarts: int = 5,
) -> MixedDefenderStrategy:
    """Non-robust baseline: sample-average optimization against the base model.

    Each restart redraws base-model samples and re-optimizes from a fresh
    random initialization; the restarts are mixed with equal probability.
    """
    from .diffusion import ancestral_sample

    atoms = []
    for _ in range(n_restarts):
        z = ancestral_sample(score, c, schedule, n_particles, rng)
        ens = ParticleEnsemble.uniform(z)
        x0 = random_patrol(budget, z.shape[1], rng).x
        atoms.append(_saa_best_response(ens, params, budget, ma, x0))
    return MixedDefenderStrategy.uniform(atoms)


def aor_solve(
    score,
    c: np.ndarray | None,
    schedule: NoiseSchedule,
    params,
    budget: float,
    gamma: float,
    n_particles: int,
    rng: np.random.Generator,
    ma: MirrorAscentConfig = MirrorAscentConfig(),
    n_restarts: int = 5,
    rounds: int = 5,
) -> MixedDefenderStrategy:
    """Alternating heuristic: re-optimize against the worst case of the
    current strategy, sampled by twisted SMC, for a fixed number of rounds.

    Each restart starts with a plain base-model optimization (the ``rounds=0``
    case coincides with the non-robust baseline).
    """
    from .diffusion import ancestral_sample

    atoms = []
    for _ in range(n_restarts):
        z = ancestral_sample(score, c, schedule, n_particles, rng)
        x0 = random_patrol(budget, z.shape[1], rng).x
        x = _saa_best_response(ParticleEnsemble.uniform(z), params, budget, ma, x0)
        for _ in range(rounds):
            tilt = TiltSpec(
                gamma=gamma, pi=MixedDefenderStrategy.point_mass(x), utility=params
            )
            ens = twisted_smc(score, c, tilt, n_particles, schedule, rng=rng)
            x = _saa_best_response(ens, params, budget, ma, x0=x.x)
        atoms.append(x)
    return MixedDefenderStrategy.uniform(atoms)


def solve_one(
    method: str,
    score,
    c: np.ndarray | None,
    schedule: NoiseSchedule,
    params,
    cfg: ExperimentConfig,
    rng: np.random.Generator,
    gamma: float | None = None,
    n_particles: int | None = None,
) -> MixedDefenderStrategy:
    """Dispatch one solver run; ``gamma``/``n_particles`` override the config."""
    gamma = cfg.gamma if gamma is None else gamma
    n_particles = cfg.n_particles if n_particles is None else n_particles
    ma = MirrorAscentConfig(step_size=cfg.ma_step, iterations=cfg.ma_iters)
    if method == "nro":
        return nro_solve(
            score, c, schedule, params, cfg.budget, n_particles, rng,
            ma=ma, n_restarts=cfg.n_restarts,
        )
    if method == "aor":
        return aor_solve(
            score, c, schedule, params, cfg.budget, gamma, n_particles, rng,
            ma=ma, n_restarts=cfg.n_restarts, rounds=cfg.aor_rounds,
        )
    if method.startswith("do-"):
        do_cfg = DoubleOracleConfig(
            utility=params,
            budget=cfg.budget,
            gamma=gamma,
            epsilon=cfg.epsilon,
            prob=cfg.prob,
            max_iters=cfg.max_iters,
            samples=FixedSamples(n_particles),
            ma=ma,
            sampler=method.removeprefix("do-"),
        )
        sol = double_oracle(score, c, do_cfg, rng, schedule=schedule)
        return sol.pi_star
    raise ConfigError(f"unknown method '{method}'")


# ---------------------------------------------------------------------------
# The experiment runner
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegretRow:
    method: str
    seed: int
    instance: int
    gamma_test: float
    regret: float
    best: float
    achieved: float


@dataclass
class RegretReport:
    rows: list[RegretRow]
    average: dict[str, float] = field(default_factory=dict)
    worst: dict[str, float] = field(default_factory=dict)
    average_stderr: dict[str, float] = field(default_factory=dict)
    worst_stderr: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: list[RegretRow]) -> "RegretReport":
        report = cls(rows=list(rows))
        methods = sorted({r.method for r in rows})
        for m in methods:
            per_seed_avg, per_seed_worst = [], []
            seeds = sorted({r.seed for r in rows if r.method == m})
            for s in seeds:
                vals = [r.regret for r in rows if r.method == m and r.seed == s]
                per_seed_avg.append(float(np.mean(vals)))
                per_seed_worst.append(float(np.max(vals)))
            report.average[m] = float(np.mean(per_seed_avg))
            report.worst[m] = float(np.mean(per_seed_worst))
            n = max(len(seeds), 1)
            report.average_stderr[m] = float(np.std(per_seed_avg, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
            report.worst_stderr[m] = float(np.std(per_seed_worst, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return report


def _run_job(args: tuple) -> list[dict]:
    """Worker entry: solve one (method, seed, instance) job and score it.

    Must stay importable at module level for process pools; rebuilds the
    testbed deterministically from the config dict.
    """
    cfg_dict, method, seed, instance, best_values = args
    cfg = ExperimentConfig(**cfg_dict)
    testbed = AnalyticTestbed.build(cfg)
    c = testbed.contexts[instance]
    rng = derive_rng(seed, method, instance)
    pi = solve_one(
        method, testbed.model, c, testbed.schedule, testbed.params, cfg, rng
    )
    out = []
    for g_test in cfg.gamma_test:
        res = evaluate_regret_analytic(
            pi, testbed, c, g_test,
            grid_points=cfg.eval_grid_points,
            best_value=best_values[(instance, g_test)],
        )
        out.append(
            {
                "method": method,
                "seed": seed,
                "instance": instance,
                "gamma_test": g_test,
                **res,
            }
        )
    solution = {
        "atoms": [a.x.tolist() for a in pi.atoms],
        "probs": pi.probs.tolist(),
        "method": method,
        "seed": seed,
        "instance": instance,
    }
    return [{"rows": out, "solution": solution}]


def _config_as_dict(cfg: ExperimentConfig) -> dict:
    return {
        "testbed": cfg.testbed,
        "model": cfg.model,
        "methods": cfg.methods,
        "budget": cfg.budget,
        "gamma": cfg.gamma,
        "gamma_test": cfg.gamma_test,
        "seeds": cfg.seeds,
        "n_contexts": cfg.n_contexts,
        "n_particles": cfg.n_particles,
        "schedule_t": cfg.schedule_t,
        "epsilon": cfg.epsilon,
        "prob": cfg.prob,
        "max_iters": cfg.max_iters,
        "ma_step": cfg.ma_step,
        "ma_iters": cfg.ma_iters,
        "aor_rounds": cfg.aor_rounds,
        "n_restarts": cfg.n_restarts,
        "eval_grid_points": cfg.eval_grid_points,
        "eval_draws": cfg.eval_draws,
        "output_dir": cfg.output_dir,
        "workers": cfg.workers,
        "context_seed": cfg.context_seed,
    }


def run_experiment(cfg: ExperimentConfig | str) -> RegretReport:
    """Execute all (method, seed, instance) jobs and write artifacts.

    Results are written under the resolved output directory: ``regret.csv``
    (one row per job and test tilt), ``summary.csv`` (per-method mean and
    standard error over seeds), per-job solution JSONs, and a manifest.
    Reruns with the same config are byte-identical, serial or parallel.
    """
    if isinstance(cfg, str):
        cfg = load_config(cfg)
    if not cfg.testbed.startswith("analytic"):
        raise ConfigError("run_experiment currently drives the analytic testbed")

    out_dir = cfg.resolved_output_dir()
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "solutions"), exist_ok=True)

    testbed = AnalyticTestbed.build(cfg)
    # best responses depend only on (instance, tilt): compute once, share
    best_values: dict[tuple[int, float], float] = {}
    for inst in range(cfg.n_contexts):
        grid = testbed.eval_grid(cfg.eval_grid_points)
        for g_test in cfg.gamma_test:
            logw = testbed.truth_log_probs(testbed.contexts[inst], g_test, grid)
            w = np.exp(logw)
            vals = [float(w @ testbed.params.value(x, grid)) for x in testbed.budget_line()]
            best_values[(inst, g_test)] = max(vals)

    cfg_dict = _config_as_dict(cfg)
    jobs = [
        (cfg_dict, method, seed, instance, best_values)
        for method in cfg.methods
        for seed in cfg.seeds
        for instance in range(cfg.n_contexts)
    ]

    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            payloads = list(pool.map(_run_job, jobs))
    else:
        payloads = [_run_job(job) for job in jobs]

    rows: list[RegretRow] = []
    for payload in payloads:
        for item in payload:
            for r in item["rows"]:
                rows.append(RegretRow(**r))
            sol = item["solution"]
            name = f"{sol['method']}_seed{sol['seed']}_inst{sol['instance']}.json"
            with open(os.path.join(out_dir, "solutions", name), "w") as fh:
                json.dump(sol, fh, indent=1)

    rows.sort(key=lambda r: (r.method, r.seed, r.instance, r.gamma_test))
    with open(os.path.join(out_dir, "regret.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["method", "seed", "instance", "gamma_test", "regret", "best", "achieved"]
        )
        for r in rows:
            writer.writerow(
                [r.method, r.seed, r.instance, repr(r.gamma_test),
                 repr(r.regret), repr(r.best), repr(r.achieved)]
            )

    report = RegretReport.from_rows(rows)
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["method", "budget", "avg_regret", "avg_stderr", "worst_regret", "worst_stderr"]
        )
        for m in sorted(report.average):
            writer.writerow(
                [m, repr(cfg.budget), repr(report.average[m]), repr(report.average_stderr[m]),
                 repr(report.worst[m]), repr(report.worst_stderr[m])]
            )

    manifest = {
        "format": "diffpatrol-run-v1",
        "version": _pkg_version,
        "config": cfg_dict,
        "truth": "quadrature tilt of the analytic base model",
        "n_jobs": len(jobs),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return report


def load_score_model(cfg: ExperimentConfig):
    """Resolve the model spec: the analytic testbed model or a checkpoint."""
    if cfg.model == "analytic":
        testbed = AnalyticTestbed.build(cfg)
        return testbed.model, testbed.schedule
    net, schedule = load_checkpoint(cfg.model)
    return net, schedule
