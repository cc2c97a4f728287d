"""Extrapolation, interpolation and projection between point clouds,
discrepancy errors, and steepest-descent point fitting.

The projection operator ``K(Z, Y) K(X, Y)^{-1}`` (with the least-squares
rectangular inverse) specializes to extrapolation when Y = X and to
interpolation when Z = Y; both convenience functions route through the same
code path.  The discrepancy is the kernel distance between uniform discrete
measures; its gradient flow moves a candidate cloud toward a target measure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import _as_points
from .operators import DEFAULT_REGULARIZATION, NodeBasis

__all__ = [
    "DescentTrace",
    "extrapolate",
    "extrapolate_gradient",
    "interpolate",
    "project_three",
    "discrepancy",
    "discrepancy_squared",
    "error_bound",
    "descend_discrepancy",
    "descend_fit",
]


@dataclass
class DescentTrace:
    """Record of a descent run: iterates, objective values and step sizes."""

    iterates: list = field(default_factory=list)
    objective_values: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    converged: bool = False
    diverged: bool = False

    @property
    def final(self):
        return self.iterates[-1]

    def save_csv(self, path):
        rows = np.column_stack([np.arange(len(self.objective_values)),
                                np.asarray(self.objective_values)])
        np.savetxt(path, rows, delimiter=",", header="step,objective", comments="")


def _ridge(mat, reg):
    if reg <= 0.0:
        return mat
    n = mat.shape[0]
    return mat + reg * n * float(np.mean(np.diag(mat))) * np.eye(n)


def project_three(kernel, X, Y, Z, f_X, reg=DEFAULT_REGULARIZATION):
    """Apply ``K(Z, Y) K(X, Y)^{-1}`` to values on X, evaluated on Z.

    ``Y`` is the regression cloud with ``len(Y) <= len(X)``;
    ``K(X, Y)^{-1}`` is the least-squares inverse
    ``(K(Y, X) K(X, Y))^{-1} K(Y, X)`` (ridge-regularized).  When Y is X the
    square Gram system is solved directly.
    """
    X, Y, Z = _as_points(X), _as_points(Y), _as_points(Z)
    f = np.asarray(f_X, dtype=float)
    if f.shape[0] != X.shape[0]:
        raise ValueError("f_X rows must align with X")
    if Y.shape[0] > X.shape[0]:
        raise ValueError("regression cloud must not be larger than the data cloud")
    flat = f.reshape(X.shape[0], -1)
    if Y is X or (Y.shape == X.shape and np.array_equal(Y, X)):
        KXX = _ridge(kernel.gram(X, X), reg)
        coeffs = np.linalg.solve(KXX, flat)
    else:
        A = kernel.gram(X, Y)
        KYY = _ridge(A.T @ A, reg)
        coeffs = np.linalg.solve(KYY, A.T @ flat)
    out = kernel.gram(Z, Y) @ coeffs
    return out.reshape((Z.shape[0],) + f.shape[1:])


def extrapolate(kernel, X, f_X, Y, reg=DEFAULT_REGULARIZATION, augmentation=None):
    """Extend values known on X to a cloud Y: ``K(Y, X) K(X, X)^{-1} f_X``."""
    if augmentation is not None:
        basis = NodeBasis(X, kernel, reg=reg, augmentation=augmentation)
        return basis.project(f_X, Y)
    return project_three(kernel, X, X, Y, f_X, reg=reg)


def extrapolate_gradient(kernel, X, f_X, Y, reg=DEFAULT_REGULARIZATION,
                         augmentation=None):
    """Gradient of the extrapolant at Y: ``(grad K)(Y, X) K(X, X)^{-1} f_X``.

    Returns shape (M, D) for vector ``f_X`` and (M, D, T) for matrix values.
    """
    basis = NodeBasis(X, kernel, reg=reg, augmentation=augmentation)
    out = basis.project_gradient(f_X, Y)
    return out


def interpolate(kernel, X, f_X, Y, reg=DEFAULT_REGULARIZATION):
    """Least-squares fit on a larger cloud Y: ``K(Y, Y) K(X, Y)^{-1} f_X``."""
    return project_three(kernel, X, Y, Y, f_X, reg=reg)


def discrepancy_squared(kernel, X, Y):
    """Squared kernel distance between the uniform measures on two clouds."""
    X, Y = _as_points(X), _as_points(Y)
    n, m = X.shape[0], Y.shape[0]
    kxx = float(np.sum(kernel.gram(X, X))) / (n * n)
    kyy = float(np.sum(kernel.gram(Y, Y))) / (m * m)
    kxy = float(np.sum(kernel.gram(X, Y))) / (n * m)
    return kxx + kyy - 2.0 * kxy


def discrepancy(kernel, X, Y):
    """Kernel discrepancy (MMD) between uniform measures on two clouds.

    Floating-point negatives of the squared form are clamped to zero before
    the square root.
    """
    return float(np.sqrt(max(discrepancy_squared(kernel, X, Y), 0.0)))


def error_bound(kernel, X, Y, Z, f_norm):
    """Two-hop projection error bound ``(d(X, Y) + d(Y, Z)) * |f|``."""
    if f_norm < 0:
        raise ValueError("f_norm must be nonnegative")
    return (discrepancy(kernel, X, Y) + discrepancy(kernel, Y, Z)) * f_norm


def _discrepancy_gradient(kernel, X, Y):
    """Gradient of d^2(mu_Y, mu_X) with respect to the rows of X."""
    n, m = X.shape[0], Y.shape[0]
    gxx = kernel.grad_gram(X, X).sum(axis=1)  # (N, D)
    gxy = kernel.grad_gram(X, Y).sum(axis=1)
    return (2.0 / n**2) * gxx - (2.0 / (n * m)) * gxy


def descend_discrepancy(kernel, target, X0, steps=100, lr=1.0, seed=None,
                        n_mc=1000, rel_tol=1e-10, grad_tol=1e-12):
    """Steepest descent of the squared discrepancy toward a target measure.

    ``target`` is a point cloud, or a callable ``sampler(rng, n) -> cloud``
    (sampled once with the fixed seed, then treated as a discrete target).
    Explicit Euler with a backtracking halving line search; stops on the step
    budget, relative objective change below ``rel_tol``, or gradient below
    ``grad_tol``.  Ten consecutive failed line searches mark the trace as
    diverged.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if lr <= 0:
        raise ValueError("lr must be positive")
    if callable(target):
        rng = np.random.default_rng(seed)
        Y = _as_points(target(rng, n_mc))
    else:
        Y = _as_points(target)
    X = _as_points(X0).copy()
    trace = DescentTrace()
    obj = discrepancy_squared(kernel, X, Y)
    trace.iterates.append(X.copy())
    trace.objective_values.append(obj)
    stalls = 0
    for _ in range(steps):
        g = _discrepancy_gradient(kernel, X, Y)
        gnorm = np.max(np.abs(g))
        if gnorm < grad_tol:
            trace.converged = True
            break
        step = lr
        accepted = False
        for _ in range(30):
            Xnew = X - step * g
            new_obj = discrepancy_squared(kernel, Xnew, Y)
            if new_obj <= obj + 1e-12:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            stalls += 1
            if stalls >= 10:
                trace.diverged = True
                break
            continue
        stalls = 0
        rel_change = abs(obj - new_obj) / max(abs(obj), np.finfo(float).tiny)
        X, obj = Xnew, new_obj
        trace.iterates.append(X.copy())
        trace.objective_values.append(obj)
        trace.step_sizes.append(step)
        if rel_change < rel_tol:
            trace.converged = True
            break
    return trace


def descend_fit(kernel, Y, f_Y, X0, steps=100, lr=1.0, reg=DEFAULT_REGULARIZATION,
                rel_tol=1e-10, grad_tol=1e-12):
    """Move regression points X to minimize the projection residual on (Y, f_Y).

    At each step the constraint values ``f_X = Inter(X, Y) f_Y`` are
    refreshed, the residual ``e = Extra(X -> Y) f_X - f_Y`` is formed, and X
    follows the explicit-Euler step of the residual gradient flow with a
    backtracking line search.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    Y = _as_points(Y)
    X = _as_points(X0).copy()
    if X.shape[0] > Y.shape[0]:
        raise ValueError("X must not have more points than Y")
    f_Y = np.asarray(f_Y, dtype=float)
    fmat = f_Y.reshape(Y.shape[0], -1)

    def residual(Xc):
        f_X = interpolate(kernel, Y, fmat, Xc, reg=reg)
        pred = extrapolate(kernel, Xc, f_X, Y, reg=reg)
        return f_X, pred - fmat

    trace = DescentTrace()
    f_X, e = residual(X)
    obj = float(np.sum(e * e))
    trace.iterates.append(X.copy())
    trace.objective_values.append(obj)
    stalls = 0
    for _ in range(steps):
        if obj <= grad_tol:
            trace.converged = True
            break
        KXX = _ridge(kernel.gram(X, X), reg)
        coeffs = np.linalg.solve(KXX, f_X)  # (N, P)
        G = kernel.grad_gram(X, Y)  # (N, M, D)
        grad = np.einsum("nmd,mp,np->nd", G, e, coeffs)
        gnorm = np.max(np.abs(grad))
        if gnorm < grad_tol:
            trace.converged = True
            break
        step = lr
        accepted = False
        for _ in range(30):
            Xnew = X - step * grad
            f_Xn, en = residual(Xnew)
            new_obj = float(np.sum(en * en))
            if new_obj <= obj + 1e-12:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            stalls += 1
            if stalls >= 10:
                trace.diverged = True
                break
            continue
        stalls = 0
        rel_change = abs(obj - new_obj) / max(abs(obj), np.finfo(float).tiny)
        X, f_X, e, obj = Xnew, f_Xn, en, new_obj
        trace.iterates.append(X.copy())
        trace.objective_values.append(obj)
        trace.step_sizes.append(step)
        if rel_change < rel_tol:
            trace.converged = True
            break
    return trace
