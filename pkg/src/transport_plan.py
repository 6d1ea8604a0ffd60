"""Transportation simplex for the mixing-weight linear program

    min sum_ij lambda_ij C_ij   s.t.  sum_j lambda_ij = alpha_i,  sum_i lambda_ij = beta_j,  lambda >= 0.

Northwest-corner start, MODI (u + w) pricing with the first improving cell in
row-major order entering, and degeneracy resolved by the classic perturbation
alpha_i + d, beta_last + N1 d carried symbolically: every flow is a pair
(value, coefficient of d) compared lexicographically, so the perturbation
never touches the floating point values that are returned.
"""
import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from utils.errors import BadMarginals, DimensionMismatch
from utils.gaussians import check_simplex

logger = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-10
VALUE_TOL = 1e-13


@dataclass(frozen=True)
class TransportPlan:
    lam: np.ndarray
    objective: float
    alpha: np.ndarray
    beta: np.ndarray
    row_potentials: np.ndarray
    col_potentials: np.ndarray
    basis: tuple
    iterations: int

    @property
    def rows(self):
        return self.lam.shape[0]

    @property
    def cols(self):
        return self.lam.shape[1]


def dual_objective(plan):
    return float(plan.alpha @ plan.row_potentials + plan.beta @ plan.col_potentials)


def _lex_less(a, b):
    """(value, d-coefficient) pairs; values within VALUE_TOL count as equal"""
    if abs(a[0] - b[0]) > VALUE_TOL:
        return a[0] < b[0]
    return a[1] < b[1]


def _northwest_corner(alpha, beta):
    n1, n2 = alpha.size, beta.size
    supply = [[float(a), 1.0] for a in alpha]
    demand = [[float(b), 0.0] for b in beta]
    demand[-1][1] = float(n1)
    value = np.zeros((n1, n2))
    coeff = np.zeros((n1, n2))
    basis = []
    i = j = 0
    while i < n1 and j < n2:
        take = supply[i] if _lex_less(supply[i], demand[j]) else demand[j]
        take = list(take)
        value[i, j], coeff[i, j] = take
        basis.append((i, j))
        supply[i] = [supply[i][0] - take[0], supply[i][1] - take[1]]
        demand[j] = [demand[j][0] - take[0], demand[j][1] - take[1]]
        if i == n1 - 1 and j == n2 - 1:
            break
        # Exhausted supply moves down, otherwise move right
        if abs(supply[i][0]) <= VALUE_TOL and supply[i][1] == 0.0:
            i += 1
        else:
            j += 1
    return value, coeff, basis


def _potentials(cost, basis):
    n1, n2 = cost.shape
    u = np.full(n1, np.nan)
    w = np.full(n2, np.nan)
    u[0] = 0.0
    by_row = {i: [] for i in range(n1)}
    by_col = {j: [] for j in range(n2)}
    for i, j in basis:
        by_row[i].append(j)
        by_col[j].append(i)
    queue = deque([("r", 0)])
    while queue:
        kind, idx = queue.popleft()
        if kind == "r":
            for j in by_row[idx]:
                if np.isnan(w[j]):
                    w[j] = cost[idx, j] - u[idx]
                    queue.append(("c", j))
        else:
            for i in by_col[idx]:
                if np.isnan(u[i]):
                    u[i] = cost[i, idx] - w[idx]
                    queue.append(("r", i))
    return u, w


def _tree_path(basis, n1, start_row, end_col):
    """Basis cells on the tree path from row node start_row to column node end_col"""
    adjacency = {}
    for i, j in basis:
        adjacency.setdefault(("r", i), []).append((("c", j), (i, j)))
        adjacency.setdefault(("c", j), []).append((("r", i), (i, j)))
    start, goal = ("r", start_row), ("c", end_col)
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nxt, cell in adjacency.get(node, []):
            if nxt not in parent:
                parent[nxt] = (node, cell)
                queue.append(nxt)
    path = []
    node = goal
    while parent[node] is not None:
        node, cell = parent[node]
        path.append(cell)
    # Ordered from end_col back to start_row
    return path


def solve_transport(cost, alpha, beta, max_iter=10000):
    cost = np.asarray(cost, dtype=float)
    alpha = check_simplex(alpha, "alpha")
    beta = check_simplex(beta, "beta")
    if cost.shape != (alpha.size, beta.size):
        raise DimensionMismatch(
            f"cost is {cost.shape} but marginals have sizes {alpha.size}, {beta.size}", module=__name__
        )
    if not np.all(np.isfinite(cost)):
        raise BadMarginals("cost matrix has non-finite entries")

    n1, n2 = cost.shape
    value, coeff, basis = _northwest_corner(alpha, beta)
    price_tol = 1e-12 * max(1.0, float(np.max(np.abs(cost))))

    iterations = 0
    while True:
        u, w = _potentials(cost, basis)
        in_basis = set(basis)
        entering = None
        for i in range(n1):
            for j in range(n2):
                if (i, j) not in in_basis and cost[i, j] - u[i] - w[j] < -price_tol:
                    entering = (i, j)
                    break
            if entering is not None:
                break
        if entering is None:
            break
        iterations += 1
        if iterations > max_iter:
            raise BadMarginals(f"transportation simplex exceeded {max_iter} pivots", module=__name__)

        path = _tree_path(basis, n1, entering[0], entering[1])
        minus = path[0::2]
        plus = path[1::2]
        leaving = None
        for cell in minus:
            flow = (value[cell], coeff[cell])
            if leaving is None or _lex_less(flow, (value[leaving], coeff[leaving])):
                leaving = cell
            elif not _lex_less((value[leaving], coeff[leaving]), flow) and cell < leaving:
                leaving = cell
        step_value, step_coeff = value[leaving], coeff[leaving]
        for cell in minus:
            value[cell] -= step_value
            coeff[cell] -= step_coeff
        for cell in plus:
            value[cell] += step_value
            coeff[cell] += step_coeff
        value[entering] = step_value
        coeff[entering] = step_coeff
        value[leaving] = 0.0
        coeff[leaving] = 0.0
        basis = [cell for cell in basis if cell != leaving] + [entering]
        logger.debug("pivot %d: %s enters, %s leaves", iterations, entering, leaving)

    lam = np.where(np.abs(value) <= VALUE_TOL, 0.0, value)
    lam = np.maximum(lam, 0.0)
    u, w = _potentials(cost, basis)
    plan = TransportPlan(
        lam=lam,
        objective=float(np.sum(lam * cost)),
        alpha=alpha,
        beta=beta,
        row_potentials=u,
        col_potentials=w,
        basis=tuple(sorted(basis)),
        iterations=iterations,
    )
    logger.debug("transport plan after %d pivots, objective %.12g", iterations, plan.objective)
    return plan


def verify_plan(plan, alpha, beta, tol=FEASIBILITY_TOL):
    """Feasibility only: marginals and nonnegativity"""
    lam = np.asarray(plan.lam if isinstance(plan, TransportPlan) else plan, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if lam.shape != (alpha.size, beta.size):
        return False
    if np.any(lam < 0.0):
        return False
    return bool(
        np.all(np.abs(lam.sum(axis=1) - alpha) <= tol) and np.all(np.abs(lam.sum(axis=0) - beta) <= tol)
    )
