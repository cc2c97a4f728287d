"""Discrete operators on a node cloud: projection, gradient, divergence,
Laplacian, Hessian, Leray projection and the discrete Hodge decomposition.

All operators are built from a :class:`NodeBasis`, which holds a node cloud
Y, a kernel, the regularized Gram factorization and an optional polynomial
augmentation.  The gradient operator is the matrix stack
``G[d] = dK_d(Y, Y) @ K(Y, Y)^{-1}`` (augmentation handled through a bordered
system); divergence is its Euclidean adjoint, the Laplacian contracts the
gradient stack with itself, and the Hodge split solves the normal equations
of ``min_h |field - grad h|``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh

from .kernels import _as_points

__all__ = [
    "ConditioningError",
    "NodeBasis",
    "DiscreteOperator",
    "HessianOperator",
    "HodgeParts",
    "min_separation_check",
    "project",
    "rkhs_norm",
    "gradient_operator",
    "divergence_operator",
    "laplacian_operator",
    "hessian_operator",
    "leray_project",
    "inverse_gradient",
    "save_operator_csv",
]

DEFAULT_REGULARIZATION = 1e-8
EIG_FLOOR = 1e-10  # relative eigenvalue floor for the (grad^T grad) pseudo-solve


class ConditioningError(np.linalg.LinAlgError):
    """Gram matrix not invertible within the requested regularization."""

    def __init__(self, message, cond=None):
        super().__init__(message)
        self.cond = cond


def min_separation_check(nodes, tol=1e-12):
    """Reject node clouds with (near-)duplicate rows.

    Duplicates make the Gram matrix singular; the check uses the infinity
    norm with threshold ``tol``.
    """
    nodes = _as_points(nodes)
    n = nodes.shape[0]
    if n > 4096:
        # full pairwise check too large; sort-based screen on a random projection
        rng = np.random.default_rng(0)
        proj = nodes @ rng.standard_normal(nodes.shape[1])
        order = np.argsort(proj)
        close = np.flatnonzero(np.abs(np.diff(proj[order])) < tol)
        for i in close:
            a, b = order[i], order[i + 1]
            if np.max(np.abs(nodes[a] - nodes[b])) < tol:
                raise ValueError(f"duplicate nodes {a} and {b} (separation < {tol})")
        return nodes
    diff = np.max(np.abs(nodes[:, None, :] - nodes[None, :, :]), axis=2)
    diff[np.diag_indices(n)] = np.inf
    i, j = np.unravel_index(np.argmin(diff), diff.shape)
    if diff[i, j] < tol:
        raise ValueError(f"duplicate nodes {i} and {j} (separation < {tol})")
    return nodes


def _poly_block(nodes, augmentation):
    """Monomial regressor block for the bordered system (or None)."""
    if augmentation in (None, "none"):
        return None
    n, d = nodes.shape
    if augmentation == "constant":
        return np.ones((n, 1))
    if augmentation == "linear":
        return np.hstack([np.ones((n, 1)), nodes])
    raise ValueError(f"unknown augmentation {augmentation!r}")


def _poly_grad_block(nodes, augmentation, d_axis):
    """Derivative of the monomial block along coordinate ``d_axis``."""
    n, d = nodes.shape
    if augmentation == "constant":
        return np.zeros((n, 1))
    out = np.zeros((n, 1 + d))
    out[:, 1 + d_axis] = 1.0
    return out


class NodeBasis:
    """Kernel basis on a node cloud with regularized Gram factorization.

    Parameters
    ----------
    nodes : (N, D) array
        Distinct node points (checked by :func:`min_separation_check`).
    kernel : Kernel
        Admissible kernel providing Gram and gradient-Gram assembly.
    reg : float
        Relative ridge; the factorized matrix is
        ``K + reg * N * mean(diag K) * I``.  ``reg=0`` gives exact
        reproduction at the nodes.
    augmentation : None | "constant" | "linear"
        Extra polynomial regressors appended through a bordered system.
        Constant augmentation makes the discrete gradient annihilate
        constants exactly.
    """

    def __init__(self, nodes, kernel, reg=DEFAULT_REGULARIZATION, augmentation=None):
        self.nodes = min_separation_check(nodes)
        self.kernel = kernel
        self.reg = float(reg)
        self.augmentation = augmentation
        n = self.nodes.shape[0]
        K = kernel.gram(self.nodes, self.nodes)
        K = 0.5 * (K + K.T)
        ridge = self.reg * n * float(np.mean(np.diag(K)))
        self._Kreg = K + ridge * np.eye(n)
        try:
            self._cho = cho_factor(self._Kreg, lower=True)
        except np.linalg.LinAlgError as err:
            w = np.linalg.eigvalsh(self._Kreg)
            cond = abs(w[-1]) / max(abs(w[0]), np.finfo(float).tiny)
            raise ConditioningError(
                f"Gram matrix not positive definite at reg={self.reg:g} "
                f"(estimated condition number {cond:.3g})", cond=cond) from err
        self._P = _poly_block(self.nodes, augmentation)
        if self._P is not None:
            KinvP = cho_solve(self._cho, self._P)
            S = self._P.T @ KinvP
            self._KinvP = KinvP
            self._S = S
            try:
                self._S_inv = np.linalg.inv(S)
            except np.linalg.LinAlgError as err:
                raise ConditioningError("degenerate polynomial augmentation") from err
        self._grad_stack = None
        self._div_gram = None
        self._hodge_eig = None

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def dim(self):
        return self.nodes.shape[1]

    def solve_gram(self, rhs):
        """Apply the regularized Gram inverse."""
        return cho_solve(self._cho, rhs)

    def coefficients(self, f_values):
        """Kernel and polynomial coefficients ``(a, b)`` of the interpolant."""
        f = np.asarray(f_values, dtype=float)
        flat = f.reshape(self.n_nodes, -1)
        Kinvf = cho_solve(self._cho, flat)
        if self._P is None:
            a, b = Kinvf, None
        else:
            b = self._S_inv @ (self._P.T @ Kinvf)
            a = Kinvf - self._KinvP @ b
        return a, b

    def project(self, f_values, query):
        """Evaluate the interpolant of ``f_values`` at ``query`` points."""
        query = _as_points(query)
        f = np.asarray(f_values, dtype=float)
        a, b = self.coefficients(f)
        out = self.kernel.gram(query, self.nodes) @ a
        if b is not None:
            out += _poly_block(query, self.augmentation) @ b
        return out.reshape((query.shape[0],) + f.shape[1:])

    def project_gradient(self, f_values, query):
        """Evaluate the gradient of the interpolant at ``query`` points, shape (M, D, ...)."""
        query = _as_points(query)
        f = np.asarray(f_values, dtype=float)
        a, b = self.coefficients(f)
        G = self.kernel.grad_gram(query, self.nodes)  # (M, N, D)
        out = np.einsum("mnd,np->mdp", G, a)
        if b is not None:
            for d in range(self.dim):
                out[:, d, :] += _poly_grad_block(query, self.augmentation, d) @ b
        return out.reshape((query.shape[0], self.dim) + f.shape[1:])

    def rkhs_norm(self, f_values):
        """Squared native-space norm ``f^T K(Y,Y)^{-1} f`` of the interpolant."""
        f = np.asarray(f_values, dtype=float).reshape(self.n_nodes)
        return float(f @ cho_solve(self._cho, f))

    def _coefficient_maps(self):
        """Matrices (A, B) mapping node values to kernel/polynomial coefficients."""
        eye = np.eye(self.n_nodes)
        Kinv = cho_solve(self._cho, eye)
        if self._P is None:
            return Kinv, None
        B = self._S_inv @ (self._KinvP.T)
        A = Kinv - self._KinvP @ B
        return A, B

    def gradient_stack(self):
        """Gradient operator stack of shape (D, N, N)."""
        if self._grad_stack is None:
            A, B = self._coefficient_maps()
            G = self.kernel.grad_gram(self.nodes, self.nodes)  # (N, N, D)
            stack = np.einsum("nmd,mq->dnq", G, A)
            if B is not None:
                for d in range(self.dim):
                    stack[d] += _poly_grad_block(self.nodes, self.augmentation, d) @ B
            self._grad_stack = stack
        return self._grad_stack

    def apply_gradient(self, h):
        """Discrete gradient of node values ``h``: shape (N, D[, P])."""
        G = self.gradient_stack()
        h = np.asarray(h, dtype=float)
        if h.ndim == 1:
            return np.einsum("dnm,m->nd", G, h)
        return np.einsum("dnm,mp->ndp", G, h)

    def apply_divergence(self, F):
        """Euclidean adjoint of the gradient applied to an (N, D) field."""
        G = self.gradient_stack()
        F = np.asarray(F, dtype=float)
        return np.einsum("dnm,nd->m", G, F)

    def _hodge_factorization(self):
        if self._hodge_eig is None:
            G = self.gradient_stack()
            A = sum(G[d].T @ G[d] for d in range(self.dim))
            w, V = eigh(0.5 * (A + A.T))
            self._hodge_eig = (w, V)
        return self._hodge_eig

    def hodge_potential(self, field):
        """Least-squares potential ``h`` minimizing ``|grad h - field|`` (min-norm)."""
        field = np.asarray(field, dtype=float)
        rhs = self.apply_divergence(field)
        w, V = self._hodge_factorization()
        floor = EIG_FLOOR * max(w[-1], 0.0)
        inv = np.where(w > floor, 1.0 / np.where(w > floor, w, 1.0), 0.0)
        return V @ (inv * (V.T @ rhs))

    def hodge_null_dimension(self):
        """Dimension of the (numerical) null space of grad^T grad."""
        w, _ = self._hodge_factorization()
        floor = EIG_FLOOR * max(w[-1], 0.0)
        return int(np.sum(w <= floor))


@dataclass
class DiscreteOperator:
    """Dense realization of a kernel-discretized operator.

    ``matrix`` has shape (N, N) for scalar operators and (D, N, N) for
    vector operators (gradient, divergence stacks).
    """

    matrix: np.ndarray
    kind: str
    dim: int

    def apply(self, values):
        values = np.asarray(values, dtype=float)
        if self.matrix.ndim == 2:
            return self.matrix @ values
        if self.kind == "divergence":
            # stack holds the transposed gradient matrices
            return np.einsum("dmn,nd->m", self.matrix, values)
        if values.ndim == 1:
            return np.einsum("dnm,m->nd", self.matrix, values)
        return np.einsum("dnm,mp->ndp", self.matrix, values)


@dataclass
class HodgeParts:
    """Result of the discrete Hodge/Leray split ``field = grad(potential) + zeta``."""

    potential: np.ndarray
    gradient_part: np.ndarray
    divergence_free: np.ndarray
    null_dimension: int


class HessianOperator:
    """Second-order operator stack, assembled lazily per (d, d') pair.

    The full (D, D, N, N) array costs D^2 N^2 memory, so blocks are built on
    demand from the cached gradient stack.
    """

    def __init__(self, basis):
        self.basis = basis
        self._blocks = {}

    def block(self, d, dprime):
        key = (int(d), int(dprime))
        if key not in self._blocks:
            G = self.basis.gradient_stack()
            self._blocks[key] = G[key[0]] @ G[key[1]]
        return self._blocks[key]

    def apply(self, h):
        """Full Hessian of node values: shape (N, D, D[, P])."""
        D = self.basis.dim
        h = np.asarray(h, dtype=float)
        out = np.empty((self.basis.n_nodes, D, D) + h.shape[1:])
        for d in range(D):
            for dp in range(D):
                out[:, d, dp] = self.block(d, dp) @ h
        return out

    def trace(self):
        """Sum of diagonal blocks; equals the Laplacian operator matrix."""
        D = self.basis.dim
        return sum(self.block(d, d) for d in range(D))


def project(basis, f_values, query):
    """Kernel projection of node values evaluated at query points."""
    return basis.project(f_values, query)


def rkhs_norm(basis, f_values):
    """Squared native-space norm of the interpolant of ``f_values``."""
    return basis.rkhs_norm(f_values)


def gradient_operator(basis):
    """Stack of D matrices realizing the discrete gradient at the nodes."""
    return DiscreteOperator(basis.gradient_stack(), "gradient", basis.dim)


def divergence_operator(basis):
    """Euclidean adjoint of the gradient (transposed stack)."""
    G = basis.gradient_stack()
    return DiscreteOperator(np.ascontiguousarray(np.swapaxes(G, 1, 2)),
                            "divergence", basis.dim)


def laplacian_operator(basis):
    """Contraction ``sum_d G_d G_d`` of the gradient stack."""
    G = basis.gradient_stack()
    mat = sum(G[d] @ G[d] for d in range(basis.dim))
    return DiscreteOperator(mat, "laplacian", basis.dim)


def hessian_operator(basis):
    """Lazy (D, D) stack of second-order operator blocks."""
    return HessianOperator(basis)


def leray_project(basis, field):
    """Split a node field into its gradient part and divergence-free remainder."""
    field = np.asarray(field, dtype=float)
    if field.shape != (basis.n_nodes, basis.dim):
        raise ValueError(f"field must have shape {(basis.n_nodes, basis.dim)}")
    h = basis.hodge_potential(field)
    grad_part = basis.apply_gradient(h)
    zeta = field - grad_part
    return HodgeParts(h, grad_part, zeta, basis.hodge_null_dimension())


def inverse_gradient(basis, field):
    """Potential whose discrete gradient best matches ``field`` (least squares)."""
    field = np.asarray(field, dtype=float)
    if field.shape != (basis.n_nodes, basis.dim):
        raise ValueError(f"field must have shape {(basis.n_nodes, basis.dim)}")
    return basis.hodge_potential(field)


def save_operator_csv(op, path):
    """Write a dense operator to CSV (row-major, header with kind/N/D)."""
    mat = op.matrix
    if mat.ndim == 3:
        n = mat.shape[1]
        flat = mat.reshape(-1, mat.shape[2])
    else:
        n = mat.shape[0]
        flat = mat
    header = f"kind={op.kind},N={n},D={op.dim}"
    np.savetxt(path, flat, delimiter=",", header=header)
