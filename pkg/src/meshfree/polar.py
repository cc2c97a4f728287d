"""Polar and signed-polar decomposition of matrices, discrete polar
factorization of maps, and the derived sampling generator.

The matrix decompositions go through the SVD: ``M = W diag(s) V^T`` gives the
standard factors ``U = W V^T``, ``S+ = V diag(s) V^T``; the signed variant
moves the signs into the orthogonal factor through a diagonal sign matrix in
the V-basis.  The map factorization aligns two clouds with a linear sum
assignment on kernel pseudo-distances and then iterates a Hodge split with a
backtracking line search until the target field is a discrete gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import approx
from .kernels import GaussianKernel, _as_points, median_scale, pseudo_distance_matrix
from .operators import DEFAULT_REGULARIZATION, NodeBasis

__all__ = [
    "MatrixPolar",
    "MapFactorization",
    "SampleStats",
    "polar_matrix",
    "lsap",
    "polar_factorize_map",
    "sample_like",
    "sample_stats",
]


@dataclass
class MatrixPolar:
    """Factors of a polar decomposition: ``orthogonal @ symmetric`` equals the input."""

    orthogonal: np.ndarray
    symmetric: np.ndarray
    variant: str
    smallest_singular: float
    flags: tuple = ()


def _best_sign_vector(Q):
    """Exhaustive sign search maximizing the minimal symmetric-part eigenvalue."""
    d = Q.shape[0]
    best, best_val = None, -np.inf
    for bits in range(2 ** d):
        sigma = np.array([1.0 if bits & (1 << i) == 0 else -1.0 for i in range(d)])
        sym = 0.5 * (Q * sigma + (Q * sigma).T)
        val = np.linalg.eigvalsh(sym)[0]
        if val > best_val:
            best, best_val = sigma, val
    return best, best_val


def polar_matrix(M, variant="standard"):
    """Polar or signed-polar decomposition of a square matrix.

    ``variant="standard"`` returns orthogonal ``U`` and positive
    semi-definite symmetric ``S+`` with ``M = U S+``.  ``variant="signed"``
    returns a positive-definite orthogonal factor and a symmetric (possibly
    indefinite) factor.  The sign matrix is first chosen from the diagonal of
    ``V^T W`` (sign of zero taken as +1); if that fails the positivity check,
    all 2^D sign vectors are searched (D <= 16) and inputs admitting no
    positive choice are flagged ``"no-positive-orthogonal"``.  Singular
    inputs are flagged ``"singular"`` for the signed variant, whose
    orthogonal part is then not unique.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("polar decomposition needs a square matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix entries must be finite")
    W, s, Vt = np.linalg.svd(M)
    smin = float(s[-1])
    flags = []
    if variant == "standard":
        U = W @ Vt
        S = Vt.T @ (s[:, None] * Vt)
        return MatrixPolar(U, 0.5 * (S + S.T), "standard", smin)
    if variant != "signed":
        raise ValueError(f"unknown variant {variant!r}")
    if smin <= 1e-13 * max(s[0], 1.0):
        flags.append("singular")
    Q = Vt @ W
    diag = np.diag(Q)
    sigma = np.where(diag >= 0.0, 1.0, -1.0)
    U_plus = (W * sigma[None, :]) @ Vt
    min_eig = np.linalg.eigvalsh(0.5 * (U_plus + U_plus.T))[0]
    if min_eig <= 1e-10 and M.shape[0] <= 16:
        sigma_best, val = _best_sign_vector(Q)
        if val > min_eig:
            sigma, min_eig = sigma_best, val
            U_plus = (W * sigma[None, :]) @ Vt
    if min_eig <= 0.0:
        flags.append("no-positive-orthogonal")
    S = Vt.T @ ((sigma * s)[:, None] * Vt)
    return MatrixPolar(U_plus, 0.5 * (S + S.T), "signed", smin, tuple(flags))


def _shortest_augmenting_paths(cost):
    """Square LSAP by shortest augmenting paths with dual potentials.

    Returns (col4row, u, v) where row i is assigned to column col4row[i] and
    (u, v) are optimal dual potentials (complementary slackness holds on the
    assignment, reduced costs are nonnegative up to rounding).
    """
    n = cost.shape[0]
    u = np.zeros(n)
    v = np.zeros(n)
    col4row = np.full(n, -1, dtype=np.intp)
    row4col = np.full(n, -1, dtype=np.intp)
    idx = np.arange(n)
    for cur_row in range(n):
        shortest = np.full(n, np.inf)
        path = np.full(n, -1, dtype=np.intp)
        scanned_rows = np.zeros(n, dtype=bool)
        scanned_cols = np.zeros(n, dtype=bool)
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            scanned_rows[i] = True
            d = min_val + cost[i] - u[i] - v
            better = ~scanned_cols & (d < shortest)
            shortest[better] = d[better]
            path[better] = i
            open_cols = np.where(~scanned_cols, shortest, np.inf)
            j = int(np.argmin(open_cols))
            min_val = open_cols[j]
            if not np.isfinite(min_val):
                raise ValueError("cost matrix is infeasible (infinite entries)")
            scanned_cols[j] = True
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
        u[cur_row] += min_val
        rows = scanned_rows & (idx != cur_row)
        u[rows] += min_val - shortest[col4row[rows]]
        v[scanned_cols] += shortest[scanned_cols] - min_val
        # augment along the alternating path back to cur_row
        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break
    return col4row, u, v


def _has_perfect_matching(adj_rows, n_cols, fixed_cols):
    """Kuhn augmenting-path feasibility check on a (small) tight subgraph."""
    match_col = {}
    def try_row(r, seen):
        for c in adj_rows[r]:
            if c in fixed_cols or c in seen:
                continue
            seen.add(c)
            if c not in match_col or try_row(match_col[c], seen):
                match_col[c] = r
                return True
        return False
    for r in range(len(adj_rows)):
        if not try_row(r, set()):
            return False
    return True


def _lexicographic_refinement(cost, col4row, u, v):
    """Lexicographically smallest assignment among the optimal ones.

    All optimal assignments use only edges that are tight for the optimal
    duals; within that subgraph the smallest permutation is built greedily
    with matching-feasibility checks.
    """
    n = cost.shape[0]
    scale = max(1.0, float(np.max(np.abs(cost))))
    tol = 1e-11 * scale * max(1, n)
    tight = (cost - u[:, None] - v[None, :]) <= tol
    tight[np.arange(n), col4row] = True
    counts = tight.sum(axis=1)
    if np.all(counts == 1):
        return col4row
    result = col4row.copy()
    fixed = set()
    for i in range(n):
        candidates = np.flatnonzero(tight[i])
        candidates = [c for c in candidates if c not in fixed]
        if len(candidates) == 1:
            result[i] = candidates[0]
            fixed.add(candidates[0])
            continue
        rest = [np.flatnonzero(tight[r]) for r in range(i + 1, n)]
        for c in sorted(candidates):
            if _has_perfect_matching(rest, n, fixed | {c}):
                result[i] = c
                fixed.add(c)
                break
        else:
            # should not happen: the current assignment is always feasible
            result[i] = col4row[i]
            fixed.add(col4row[i])
    return result


def lsap(cost):
    """Minimum-cost assignment of a square cost matrix.

    Returns the permutation ``sigma`` minimizing ``sum_i cost[i, sigma[i]]``.
    Among cost-equal optima the lexicographically smallest permutation is
    returned, so the result is deterministic even for tied costs.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("cost matrix must be square")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    if cost.shape[0] == 0:
        return np.empty(0, dtype=np.intp)
    col4row, u, v = _shortest_augmenting_paths(cost)
    return _lexicographic_refinement(cost, col4row, u, v)


@dataclass
class MapFactorization:
    """Result of the discrete polar factorization ``y = grad_z h``."""

    nodes: np.ndarray            # final (reordered and transported) cloud z
    potential: np.ndarray        # h at the nodes
    residual_field: np.ndarray   # final zeta = y - grad_z h
    permutation: np.ndarray      # LSAP reordering applied to the input x
    residual_history: list
    converged: bool
    stalled: bool = False

    @property
    def residual(self):
        return self.residual_history[-1]


def _hodge_state(kernel, z, y, reg, augmentation):
    basis = NodeBasis(z, kernel, reg=reg, augmentation=augmentation)
    h = basis.hodge_potential(y)
    zeta = y - basis.apply_gradient(h)
    return basis, h, zeta, float(np.linalg.norm(zeta))


def polar_factorize_map(kernel, x, y, eps=1e-6, max_iter=50,
                        reg=DEFAULT_REGULARIZATION, augmentation=None,
                        cost_kernel=None):
    """Discrete polar factorization: find a cloud z with ``y ~ grad_z h``.

    The input cloud ``x`` is first reordered by a linear sum assignment on
    the kernel pseudo-distance cost between ``x`` and ``y`` (by default a
    Gaussian kernel at the median-heuristic scale of the joint cloud, since
    ``x`` and ``y`` may live at different scales).  Then, iteratively, the
    Hodge potential of ``y`` on the current nodes is computed and the nodes
    move against the divergence-free remainder ``zeta`` with a backtracking
    line search; a step is accepted only if the recomputed residual
    decreases, so the residual history is nonincreasing by construction.
    """
    x, y = _as_points(x), _as_points(y)
    if x.shape != y.shape:
        raise ValueError("x and y must have identical shape")
    if cost_kernel is None:
        joint = np.vstack([x, y])
        cost_kernel = GaussianKernel(median_scale(joint))
    perm = lsap(pseudo_distance_matrix(cost_kernel, y, x))
    z = x[perm].copy()

    basis, h, zeta, res = _hodge_state(kernel, z, y, reg, augmentation)
    history = [res]
    converged = res <= eps
    stalled = False
    it = 0
    while not converged and not stalled and it < max_iter:
        it += 1
        lam = 1.0
        accepted = False
        while lam >= 1e-12:
            w = z - lam * zeta
            try:
                cand = _hodge_state(kernel, w, y, reg, augmentation)
            except (ValueError, np.linalg.LinAlgError):
                lam *= 0.5
                continue
            if cand[3] < res:
                z = w
                basis, h, zeta, res = cand
                history.append(res)
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            stalled = True
        converged = res <= eps
    return MapFactorization(z, h, zeta, perm, history, converged, stalled)


def sample_like(kernel, y, m, seed, eps=1e-6, max_iter=12,
                reg=DEFAULT_REGULARIZATION, return_factorization=False):
    """Draw ``m`` new points approximately distributed like the cloud ``y``.

    A uniform cube sample is factorized against ``y`` (``y = grad_z h``) and
    the fitted gradient map is evaluated at a fresh uniform sample.
    """
    y = _as_points(y)
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=y.shape)
    fac = polar_factorize_map(kernel, x, y, eps=eps, max_iter=max_iter, reg=reg)
    w = rng.uniform(0.0, 1.0, size=(m, y.shape[1]))
    basis = NodeBasis(fac.nodes, kernel, reg=reg)
    out = basis.project_gradient(fac.potential, w)
    if return_factorization:
        return out, fac
    return out


@dataclass
class SampleStats:
    """Moment and two-sample comparison between an original and a generated cloud."""

    original_skewness: np.ndarray
    generated_skewness: np.ndarray
    original_kurtosis: np.ndarray
    generated_kurtosis: np.ndarray
    ks_statistic: np.ndarray
    ks_pvalue: np.ndarray
    discrepancy: float
    flags: tuple = ()


def sample_stats(original, generated, kernel):
    """Per-axis skewness/excess kurtosis, two-sample KS tests, and discrepancy.

    Skewness and kurtosis use the Fisher definitions (normal gives 0); the
    KS p-value uses the asymptotic Kolmogorov distribution with the standard
    two-sample effective size.
    """
    original, generated = _as_points(original), _as_points(generated)
    if original.shape[1] != generated.shape[1]:
        raise ValueError("clouds must share dimension")
    flags = []
    if min(original.shape[0], generated.shape[0]) < 8:
        flags.append("few-samples")
    d = original.shape[1]
    ks_stat = np.empty(d)
    ks_p = np.empty(d)
    for axis in range(d):
        res = stats.ks_2samp(original[:, axis], generated[:, axis], method="asymp")
        ks_stat[axis], ks_p[axis] = res.statistic, res.pvalue
    return SampleStats(
        original_skewness=stats.skew(original, axis=0),
        generated_skewness=stats.skew(generated, axis=0),
        original_kurtosis=stats.kurtosis(original, axis=0),
        generated_kurtosis=stats.kurtosis(generated, axis=0),
        ks_statistic=ks_stat,
        ks_pvalue=ks_p,
        discrepancy=approx.discrepancy(kernel, original, generated),
        flags=tuple(flags),
    )
