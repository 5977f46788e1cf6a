"""Dense simplex solver for two-player zero-sum matrix games.

The row player maximizes, the column player minimizes. After shifting the
payoff matrix to be strictly positive, the column player's LP

    max 1'q  s.t.  A'q <= 1,  q >= 0

is solved by the primal simplex method with Bland's rule (deterministic,
anti-cycling). Double-oracle subgames routinely contain duplicated and
near-duplicated strategies, which makes the tableau highly degenerate; the
solver therefore refreshes the tableau from the current basis by direct
linear solves (reinversion) so accumulated pivot drift cannot corrupt the
result. The row strategy is the dual solution recomputed from the final
basis. Matrices here are tiny (a few dozen strategies per side).
"""

from __future__ import annotations

import numpy as np

from .errors import GameSolveError

__all__ = ["solve_zero_sum", "check_equilibrium"]

_PIVOT_EPS = 1e-12


def _refined_solve(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Linear solve with two steps of iterative refinement.

    Near-duplicate strategies make simplex bases ill-conditioned; plain LU
    round-off in the reduced costs then fakes improving columns and breaks
    optimality detection.
    """
    x = np.linalg.solve(mat, rhs)
    for _ in range(2):
        x += np.linalg.solve(mat, rhs - mat @ x)
    return x


def _rebuild_tableau(
    full_a: np.ndarray, b: np.ndarray, c_full: np.ndarray, basis: list[int]
) -> np.ndarray:
    """Fresh tableau for the given basis via refined linear solves."""
    m = full_a.shape[0]
    basis_mat = full_a[:, basis]
    try:
        inv_rows = _refined_solve(basis_mat, np.column_stack([full_a, b]))
        y = _refined_solve(basis_mat.T, c_full[np.asarray(basis)])
    except np.linalg.LinAlgError as exc:
        raise GameSolveError("singular basis in matrix-game simplex") from exc
    tableau = np.zeros((m + 1, full_a.shape[1] + 1))
    tableau[:m] = inv_rows
    tableau[m, :-1] = y @ full_a - c_full
    tableau[m, -1] = y @ b
    return tableau


def _solution_from_basis(
    full_a: np.ndarray,
    b: np.ndarray,
    c_full: np.ndarray,
    basis: list[int],
    n: int,
) -> tuple[np.ndarray, np.ndarray]:
    basis_mat = full_a[:, basis]
    x = np.zeros(full_a.shape[1])
    x[basis] = _refined_solve(basis_mat, b)
    y = _refined_solve(basis_mat.T, c_full[np.asarray(basis)])
    return np.maximum(x[:n], 0.0), np.maximum(y, 0.0)


def _simplex_max(
    a: np.ndarray, b: np.ndarray, c: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Maximize c'x s.t. a x <= b (b > 0), x >= 0. Returns (x, dual y).

    Bland's smallest-index rule for the entering and leaving variable.
    Pivot elements below a column-scaled tolerance are never used
    (cancellation residue from duplicated strategies); a candidate column
    whose positive entries are all noise-level is skipped, which is sound
    for a bounded LP where such a reduced cost is itself round-off.
    """
    m, n = a.shape
    full_a = np.hstack([a, np.eye(m)])
    c_full = np.concatenate([c, np.zeros(m)])
    basis = list(range(n, n + m))

    # deterministic RHS perturbation breaks the massive degeneracy caused by
    # duplicated strategies (anti-cycling); well above arithmetic noiseyet far
    # below the certificate tolerance, and the final solution is recomputed
    # from the optimal basis against the true RHS
    b_pert = b * (1.0 + 1e-11 * np.arange(1, m + 1))

    max_pivots = 60 * (n + m + 10)
    pivots = 0
    visited: set[tuple[int, ...]] = set()
    while pivots <= max_pivots:
        state = tuple(sorted(basis))
        if state in visited:
            # revisited basis: residual reduced costs are round-off; the
            # certificate check downstream decides whether this is good enough
            break
        visited.add(state)
        tableau = _rebuild_tableau(full_a, b_pert, c_full, basis)
        reduced = tableau[m, : n + m].copy()
        reduced[basis] = 0.0  # basic variables never re-enter
        # scale-aware threshold: refined solves leave ~1e-12 noise on the
        # ill-conditioned bases produced by near-duplicate strategies
        enter_tol = max(_PIVOT_EPS, 1e-10 * (1.0 + float(np.abs(reduced).max())))
        candidates = np.nonzero(reduced < -enter_tol)[0]
        if candidates.size == 0:
            break  # optimal: a drift-free tableau offers no usable pivot
        pivot_done = False
        truly_unbounded = False
        for col in candidates:  # Bland order: smallest index first
            col = int(col)
            column = tableau[:m, col]
            pivot_tol = 1e-9 * (1.0 + float(np.abs(column).max()))
            eligible = column > pivot_tol
            if not np.any(eligible):
                if np.all(column <= _PIVOT_EPS):
                    truly_unbounded = True
                continue
            ratios = np.full(m, np.inf)
            ratios[eligible] = tableau[:m, -1][eligible] / column[eligible]
            best = np.min(ratios)
            ties = np.nonzero(ratios <= best + _PIVOT_EPS * (1.0 + abs(best)))[0]
            row = int(min(ties, key=lambda r: basis[r]))  # Bland on leaving
            basis[row] = col
            pivot_done = True
            pivots += 1
            break
        if not pivot_done:
            if truly_unbounded:
                raise GameSolveError("unbounded LP encountered in matrix game")
            break  # remaining candidates are numerical noise: optimal
    else:
        raise GameSolveError("simplex failed to terminate")
    return _solution_from_basis(full_a, b, c_full, basis, n)


def solve_zero_sum(payoff: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Solve max_pi min_l (pi' A)_l. Returns (pi, sigma, value).

    ``payoff[j, l]`` is the row player's utility for row j against column l.
    """
    a = np.asarray(payoff, dtype=float)
    if a.ndim != 2 or a.size == 0:
        raise GameSolveError("payoff matrix must be 2-D and non-empty")
    if not np.all(np.isfinite(a)):
        raise GameSolveError("payoff matrix contains non-finite entries")
    shift = 1.0 - float(a.min())
    a_pos = a + shift  # strictly positive entries keep the game value positive

    # column player's LP over the positive matrix; rows of a_pos are constraints
    q, duals = _simplex_max(a_pos, np.ones(a_pos.shape[0]), np.ones(a_pos.shape[1]))
    total = float(q.sum())
    if total <= 0:
        raise GameSolveError("degenerate LP solution in matrix game")
    sigma = q / total
    p_total = float(duals.sum())
    if p_total <= 0:
        raise GameSolveError("degenerate dual solution in matrix game")
    pi = duals / p_total

    # both guarantees bracket the game value; reporting the midpoint splits
    # the residual LP round-off evenly between the two certificates
    row_guarantee = float(np.min(pi @ a))
    col_guarantee = float(np.max(a @ sigma))
    value = 0.5 * (row_guarantee + col_guarantee)

    check_equilibrium(a, pi, sigma, value)
    return pi, sigma, value


def check_equilibrium(
    payoff: np.ndarray,
    pi: np.ndarray,
    sigma: np.ndarray,
    value: float,
    tol: float = 1e-7,
) -> None:
    """Verify both players' guarantees against the matrix; raise on failure."""
    a = np.asarray(payoff, dtype=float)
    row_guarantee = float(np.min(pi @ a))
    col_guarantee = float(np.max(a @ sigma))
    if row_guarantee < value - tol or col_guarantee > value + tol:
        raise GameSolveError(
            f"equilibrium certificate failed: row guarantee {row_guarantee:.3e}, "
            f"column guarantee {col_guarantee:.3e}, value {value:.3e}"
        )
