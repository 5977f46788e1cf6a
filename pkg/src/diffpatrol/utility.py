"""Green-security utility model and defender strategy types.

The defender allocates patrol effort ``x`` over ``K`` regions subject to a
budget; the adversary places snares ``z``. Region ``j`` contributes

    max(N0[j] * exp(r) - alpha * exp(psi * z[j] - theta * x[j]), 0)

to the defender's utility (the surviving wildlife population). With clipping
disabled the ``max`` is dropped, which makes the utility concave in ``x``
everywhere; solver-correctness tests use that variant.

All evaluation functions broadcast over leading axes of ``z``, so a batch of
adversary actions with shape ``(n, K)`` yields ``(n,)`` utilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "UtilityParams",
    "LinearUtility",
    "PatrolStrategy",
    "MixedDefenderStrategy",
    "utility",
    "utility_grad_x",
    "utility_grad_z",
    "mixed_utility",
    "mixed_utility_grad_z",
    "expected_utility",
]


@dataclass(frozen=True)
class UtilityParams:
    """Parameters of the wildlife-population utility.

    ``n0`` is the initial population per region, ``r`` the natural growth
    rate, ``alpha`` the joint impact coefficient, ``psi`` the poaching
    strength, ``theta`` the patrol effectiveness. With ``clip`` on, each
    region's term is floored at zero, bounding total utility in
    ``[0, sum(n0) * exp(r)]``.
    """

    n0: np.ndarray
    r: float = 0.1
    alpha: float = 1.0
    psi: float = 0.5
    theta: float = 1.0
    clip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "n0", np.atleast_1d(np.asarray(self.n0, dtype=float)))
        if np.any(self.n0 < 0) or not np.all(np.isfinite(self.n0)):
            raise ValueError("n0 must be finite and non-negative")
        if self.alpha <= 0 or self.psi <= 0 or self.theta <= 0:
            raise ValueError("alpha, psi, theta must be positive")

    @property
    def dim(self) -> int:
        return self.n0.shape[0]

    def upper_bound(self) -> float:
        """M such that 0 <= U <= M when clipping is on."""
        return float(np.sum(self.n0) * np.exp(self.r))

    @classmethod
    def default(cls, dim: int, clip: bool = True) -> "UtilityParams":
        return cls(n0=np.ones(dim), clip=clip)

    # protocol methods used by tilt specs and oracles
    def value(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return utility(x, z, self)

    def grad_x(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return utility_grad_x(x, z, self)

    def grad_z(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return utility_grad_z(x, z, self)


@dataclass(frozen=True)
class LinearUtility:
    """Test utility U(x, z) = coef . z + offset, independent of x.

    Used by quadrature oracles where a closed-form tilt is wanted (a linear
    tilt of a Gaussian is again Gaussian). Not part of the patrol model.
    """

    coef: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "coef", np.atleast_1d(np.asarray(self.coef, dtype=float)))

    @property
    def dim(self) -> int:
        return self.coef.shape[0]

    def upper_bound(self) -> float:
        raise ValueError("linear utility is unbounded")

    def value(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z @ self.coef + self.offset

    def grad_x(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return np.zeros(np.broadcast_shapes(np.shape(z), (self.dim,)))

    def grad_z(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(self.coef, z.shape).copy()


@dataclass(frozen=True)
class PatrolStrategy:
    """A pure defender strategy: effort vector on the budget simplex."""

    x: np.ndarray
    budget: float

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if np.any(self.x < -1e-12):
            raise ValueError("patrol effort must be non-negative")
        if float(np.sum(self.x)) > self.budget + 1e-9:
            raise ValueError(
                f"patrol effort {np.sum(self.x):.6g} exceeds budget {self.budget:.6g}"
            )

    @property
    def dim(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class MixedDefenderStrategy:
    """Finite-support mixture over patrol strategies."""

    atoms: tuple[PatrolStrategy, ...]
    probs: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        atoms = tuple(self.atoms)
        object.__setattr__(self, "atoms", atoms)
        if not atoms:
            raise ValueError("mixed strategy needs at least one atom")
        probs = self.probs
        if probs is None:
            probs = np.full(len(atoms), 1.0 / len(atoms))
        probs = np.asarray(probs, dtype=float)
        if probs.shape != (len(atoms),):
            raise ValueError("probs length must match atom count")
        if np.any(probs < -1e-12) or abs(float(probs.sum()) - 1.0) > 1e-9:
            raise ValueError("probs must be a probability vector")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def point_mass(cls, x: PatrolStrategy) -> "MixedDefenderStrategy":
        return cls(atoms=(x,), probs=np.array([1.0]))

    @classmethod
    def uniform(cls, atoms) -> "MixedDefenderStrategy":
        atoms = tuple(atoms)
        return cls(atoms=atoms, probs=np.full(len(atoms), 1.0 / len(atoms)))

    @property
    def dim(self) -> int:
        return self.atoms[0].dim

    def atom_matrix(self) -> np.ndarray:
        return np.stack([a.x for a in self.atoms])


def _region_terms(x: np.ndarray, z: np.ndarray, params: UtilityParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if x.shape[-1] != params.dim or z.shape[-1] != params.dim:
        raise ValueError(
            f"dimension mismatch: x has {x.shape[-1]}, z has {z.shape[-1]}, "
            f"params expect {params.dim}"
        )
    return params.n0 * np.exp(params.r) - params.alpha * np.exp(
        params.psi * z - params.theta * x
    )


def utility(x: np.ndarray, z: np.ndarray, params: UtilityParams) -> np.ndarray:
    """Defender utility; scalar for a single z, batched over leading z axes."""
    terms = _region_terms(x, z, params)
    if params.clip:
        terms = np.maximum(terms, 0.0)
    return np.sum(terms, axis=-1)


def utility_grad_x(x: np.ndarray, z: np.ndarray, params: UtilityParams) -> np.ndarray:
    """dU/dx per region: alpha*theta*exp(psi z - theta x) on the active region.

    Where clipping has zeroed a region's term (strictly negative inside the
    max) the gradient is 0; exactly at the kink the one-sided derivative from
    the active region is used.
    """
    terms = _region_terms(x, z, params)
    grad = params.alpha * params.theta * np.exp(
        params.psi * np.asarray(z, dtype=float) - params.theta * np.asarray(x, dtype=float)
    )
    if params.clip:
        grad = np.where(terms >= 0.0, grad, 0.0)
    return grad


def utility_grad_z(x: np.ndarray, z: np.ndarray, params: UtilityParams) -> np.ndarray:
    """dU/dz per region: -alpha*psi*exp(psi z - theta x), zero where clipped."""
    terms = _region_terms(x, z, params)
    grad = -params.alpha * params.psi * np.exp(
        params.psi * np.asarray(z, dtype=float) - params.theta * np.asarray(x, dtype=float)
    )
    if params.clip:
        grad = np.where(terms >= 0.0, grad, 0.0)
    return grad


def mixed_utility(pi: MixedDefenderStrategy, z: np.ndarray, utility_fn) -> np.ndarray:
    """U(pi, z) = sum_i pi_i * u(x_i, z), batched over leading z axes."""
    z = np.asarray(z, dtype=float)
    total = 0.0
    for prob, atom in zip(pi.probs, pi.atoms):
        total = total + prob * utility_fn.value(atom.x, z)
    return total


def mixed_utility_grad_z(pi: MixedDefenderStrategy, z: np.ndarray, utility_fn) -> np.ndarray:
    """Gradient of U(pi, z) in z, batched over leading z axes."""
    z = np.asarray(z, dtype=float)
    total = np.zeros_like(z)
    for prob, atom in zip(pi.probs, pi.atoms):
        total = total + prob * utility_fn.grad_z(atom.x, z)
    return total


def expected_utility(pi: MixedDefenderStrategy, ensembles, sigma, params) -> float:
    """Triple expectation sum_i sum_l sum_n pi_i sigma_l w_ln u(x_i, z_ln).

    ``ensembles`` is a sequence of normalized ParticleEnsemble; ``sigma`` the
    adversary mixture over them. Degenerate forms U(x, tau) and U(pi, z) are
    recovered by wrapping the pure side in a singleton.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (len(ensembles),):
        raise ValueError("sigma length must match ensemble count")
    if abs(float(sigma.sum()) - 1.0) > 1e-9:
        raise ValueError("sigma must sum to 1")
    total = 0.0
    for weight, ens in zip(sigma, ensembles):
        if weight == 0.0:
            continue
        ens.require_normalized()
        vals = mixed_utility(pi, ens.particles, params)
        total += weight * float(ens.weights @ vals)
    return total
