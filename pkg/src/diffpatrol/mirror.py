"""Entropic mirror ascent on the budget simplex.

The patrol constraint sum(x) <= B is handled by lifting to the equality
simplex {y >= 0, sum(y) = B} with one slack coordinate carrying the unused
budget; the multiplicative update then stays exactly feasible. Updates run
in log space so large utility gradients cannot overflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericError

__all__ = ["MirrorAscentConfig", "mirror_ascent_budget"]


@dataclass(frozen=True)
class MirrorAscentConfig:
    step_size: float = 0.1
    iterations: int = 100

    def __post_init__(self):
        if self.step_size <= 0 or self.iterations < 1:
            raise ValueError("mirror ascent needs positive step size and iterations")


def mirror_ascent_budget(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    objective_fn: Callable[[np.ndarray], float],
    dim: int,
    budget: float,
    cfg: MirrorAscentConfig,
    x0: np.ndarray | None = None,
) -> np.ndarray:
    """Maximize a concave objective over {x >= 0, sum(x) <= budget}.

    Starts from the uniform interior point unless ``x0`` is given. Returns
    the visited iterate with the highest objective, so the reported solution
    quality is monotone in the iteration budget.
    """
    if x0 is None:
        y = np.full(dim + 1, budget / (dim + 1))
    else:
        x0 = np.asarray(x0, dtype=float)
        slack = max(budget - float(x0.sum()), 0.0)
        y = np.concatenate([x0, [slack]])
        y = np.maximum(y, 1e-12 * budget)  # keep strictly interior for log updates
        y *= budget / y.sum()
    log_y = np.log(y)

    best_x = y[:dim].copy()
    best_val = float(objective_fn(best_x))
    for _ in range(cfg.iterations):
        x = y[:dim]
        g = np.asarray(grad_fn(x), dtype=float)
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in mirror ascent")
        log_y[:dim] += cfg.step_size * g  # slack coordinate has zero gradient
        log_y -= np.max(log_y)
        y = np.exp(log_y)
        y *= budget / y.sum()
        log_y = np.log(y)
        val = float(objective_fn(y[:dim]))
        if val > best_val:
            best_val = val
            best_x = y[:dim].copy()
    return best_x
