"""Particle scheme for the coupled forward (Fokker-Planck) and backward
(Kolmogorov) system.

Particles carry the evolving measure; the diffusion velocity is the kernel
divergence of the diffusion field on the current cloud (semi-discrete form),
or a stochastic transition matrix ``exp(dt * B)`` with
``B = -(grad)^T A (grad)`` assembled on an Euler half-step cloud (fully
discrete form).  Backward fair values retrace the stored transition matrices;
with a constant-augmented basis the matrices are bi-stochastic, which yields
the discrete momentum and mass conservation laws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from . import polar
from .approx import descend_discrepancy
from .kernels import GaussianKernel, _as_points, median_scale, pseudo_distance_matrix
from .operators import DEFAULT_REGULARIZATION, NodeBasis

__all__ = [
    "SdeModel",
    "ParticleState",
    "TransitionMatrix",
    "Trajectory",
    "init_particles",
    "step_forward_semidiscrete",
    "step_forward_fully_discrete",
    "simulate",
    "sharp_normal_sample",
    "solve_kolmogorov_backward",
    "estimate_transition_matrix",
    "sabr_model",
    "simulate_sabr",
    "hedge_static",
    "hedge_beta",
]

COLLISION_DISTANCE = 1e-8
COLLISION_JITTER = 1e-7
MONOTONICITY_TOL = -1e-8


@dataclass
class SdeModel:
    """Drift/diffusion fields of an SDE, with ``A = (1/2) sigma sigma^T``.

    ``drift(t, X)`` maps an (N, D) cloud to (N, D) drift vectors;
    ``diffusion(t, X)`` maps it to (N, D, D) symmetric PSD matrices.
    ``state_fix`` optionally post-processes particle positions after a step
    (used e.g. to reflect a CEV coordinate at its lower bound).
    """

    drift: callable
    diffusion: callable
    initial_point: np.ndarray
    t0: float
    dim: int
    state_fix: callable = None

    def growth_constant(self, t, X):
        """Sampled estimate of ``lambda`` in ``|r . x| <= lambda |x|^2``."""
        X = _as_points(X)
        r = self.drift(t, X)
        num = np.abs(np.sum(r * X, axis=1))
        den = np.maximum(np.sum(X * X, axis=1), np.finfo(float).tiny)
        return float(np.max(num / den))

    def check_diffusion(self, t, X, tol=1e-10):
        """Verify symmetry and positive semi-definiteness of A at sampled states."""
        A = self.diffusion(t, _as_points(X))
        sym_err = float(np.max(np.abs(A - np.swapaxes(A, 1, 2))))
        min_eig = float(np.min(np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, 1, 2)))))
        return sym_err <= tol and min_eig >= -tol


@dataclass
class ParticleState:
    """Particle cloud at a fixed time."""

    time: float
    particles: np.ndarray

    @property
    def n_particles(self):
        return self.particles.shape[0]


@dataclass
class TransitionMatrix:
    """Row-stochastic transition matrix between two particle states."""

    matrix: np.ndarray
    from_time: float
    to_time: float
    monotonicity_risk: bool = False

    def row_sum_error(self):
        return float(np.max(np.abs(self.matrix.sum(axis=1) - 1.0)))


@dataclass
class Trajectory:
    """Stored forward run: states per time node, transitions between them."""

    states: list = field(default_factory=list)
    transitions: list = field(default_factory=list)
    kernel: object = None

    @property
    def times(self):
        return np.array([s.time for s in self.states])

    def composition_residual(self):
        """Diagnostic: row/column-sum defect of the composed transition
        product (stochasticity should survive composition; not hard-asserted)."""
        if not self.transitions:
            return 0.0
        prod = self.transitions[0].matrix
        for tm in self.transitions[1:]:
            prod = prod @ tm.matrix
        return float(max(np.max(np.abs(prod.sum(axis=1) - 1.0)),
                         np.max(np.abs(prod.sum(axis=0) - 1.0))))


def init_particles(model, n, seed):
    """Spread ``n`` particles around the initial point by the time-t0 diffusion."""
    if n < 2:
        raise ValueError("need at least 2 particles")
    if model.t0 <= 0:
        raise ValueError("t0 must be positive")
    rng = np.random.default_rng(seed)
    x0 = np.asarray(model.initial_point, dtype=float)
    A0 = model.diffusion(0.0, x0[None, :])[0]
    xi = rng.standard_normal((n, model.dim))
    particles = x0[None, :] + np.sqrt(model.t0) * xi @ A0.T
    return ParticleState(model.t0, particles)


def _collision_guard(particles, rng=None):
    """Re-jitter near-coincident particles so Gram matrices stay invertible."""
    n = particles.shape[0]
    if n > 4096:
        return particles
    d2 = np.sum((particles[:, None, :] - particles[None, :, :]) ** 2, axis=2)
    d2[np.diag_indices(n)] = np.inf
    if np.min(d2) < COLLISION_DISTANCE**2:
        rng = np.random.default_rng(0) if rng is None else rng
        particles = particles + COLLISION_JITTER * rng.standard_normal(particles.shape)
    return particles


def _divergence_of_matrix_field(basis, A):
    """Apply the kernel divergence to each column of an (N, D, D) matrix field."""
    G = basis.gradient_stack()  # (D, N, N)
    return np.einsum("dnm,nde->me", G, A)


def step_forward_semidiscrete(state, model, kernel, dt,
                              reg=DEFAULT_REGULARIZATION, augmentation="constant",
                              rng=None):
    """One explicit Euler step of ``dS/dt = r_S + (grad_S)^T A_S``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    S = _collision_guard(state.particles, rng)
    basis = NodeBasis(S, kernel, reg=reg, augmentation=augmentation)
    A = model.diffusion(state.time, S)
    vel = model.drift(state.time, S) + _divergence_of_matrix_field(basis, A)
    new = S + dt * vel
    if model.state_fix is not None:
        new = model.state_fix(new)
    return ParticleState(state.time + dt, new)


def _matrix_sqrt_batch(A):
    """Principal square root of a batch of symmetric PSD matrices."""
    w, V = np.linalg.eigh(0.5 * (A + np.swapaxes(A, 1, 2)))
    w = np.sqrt(np.maximum(w, 0.0))
    return np.einsum("nij,nj,nkj->nik", V, w, V)


def step_forward_fully_discrete(state, model, kernel, dt, eps_sample,
                                reg=DEFAULT_REGULARIZATION, augmentation="constant",
                                rng=None):
    """Split step: RK4 drift, Euler-Maruyama diffusion with the fixed noise
    sample, and the martingale transition matrix ``exp(dt * B)``.

    ``eps_sample`` is a fixed (N, D) standard-normal sample, ideally a sharp
    discrepancy approximation of the normal law (:func:`sharp_normal_sample`);
    the applied noise increment is recentered so each coordinate mean of the
    cloud is exactly conserved when the drift vanishes.  The generator
    ``B = -(grad)^T A (grad)`` is assembled on the stepped cloud; with
    constant augmentation it kills constants on both sides, so the
    exponential is bi-stochastic up to roundoff, which yields the backward
    mass-conservation and momentum laws.  The matrix multiplies *values* in
    the backward recursion; applying it to the particle positions would
    average them toward the cloud mean (a row-stochastic map is a
    contraction), so the positions move only by the drift and noise steps.
    Off-diagonal entries of ``B`` below -1e-8 set the ``monotonicity_risk``
    flag; otherwise tiny negative entries of the exponential are clipped and
    rows renormalized.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    t = state.time
    S = _collision_guard(state.particles, rng)
    n = S.shape[0]
    eps = np.asarray(eps_sample, dtype=float)
    if eps.shape != S.shape:
        raise ValueError("eps_sample must match the particle array shape")

    # hyperbolic part: classical RK4 on the drift field
    def f(tt, X):
        return model.drift(tt, X)

    k1 = f(t, S)
    k2 = f(t + dt / 2, S + dt / 2 * k1)
    k3 = f(t + dt / 2, S + dt / 2 * k2)
    k4 = f(t + dt, S + dt * k3)
    V = S + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    # martingale part: sigma sqrt(dt) eps with sigma sqrt(dt) = sqrt(2 A dt)
    root = _matrix_sqrt_batch(2.0 * dt * model.diffusion(t, V))
    noise = np.einsum("nij,nj->ni", root, eps)
    noise -= noise.mean(axis=0)
    new = _collision_guard(V + noise, rng)
    if model.state_fix is not None:
        new = model.state_fix(new)

    basis = NodeBasis(new, kernel, reg=reg, augmentation=augmentation)
    G = basis.gradient_stack()
    A = model.diffusion(t + dt, new)
    B = np.zeros((n, n))
    for d in range(model.dim):
        for e in range(model.dim):
            B -= G[d].T @ (A[:, d, e][:, None] * G[e])

    # essential nonnegativity is kernel-dependent and generically fails for
    # smooth kernels; checked, flagged, never enforced
    offdiag = B - np.diag(np.diag(B))
    monotonicity_risk = bool(np.min(offdiag) < MONOTONICITY_TOL)

    # guard the exponential against overflow from a too-large generator norm
    norm = np.linalg.norm(dt * B, 1)
    if not np.isfinite(norm) or norm > 1e6:
        raise FloatingPointError(f"matrix exponential argument too large (norm {norm:.3g})")
    Pi = expm(dt * B)
    if not monotonicity_risk:
        Pi = np.maximum(Pi, 0.0)
        Pi /= Pi.sum(axis=1, keepdims=True)

    return (ParticleState(t + dt, new),
            TransitionMatrix(Pi, from_time=t, to_time=t + dt,
                             monotonicity_risk=monotonicity_risk))


def sharp_normal_sample(n, dim, seed, steps=20, kernel=None, n_mc=2000):
    """Standard-normal sample pushed toward a sharp discrepancy configuration."""
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((n, dim))
    if steps <= 0:
        return x0
    if kernel is None:
        kernel = GaussianKernel(median_scale(x0))
    trace = descend_discrepancy(kernel, lambda r, m: r.standard_normal((m, dim)),
                                x0, steps=steps, seed=seed, n_mc=n_mc)
    return trace.final


def simulate(model, kernel, n, times, seed, substeps=10,
             reg=DEFAULT_REGULARIZATION, augmentation="constant",
             descent_steps=20):
    """Run the fully discrete scheme through the given snapshot times.

    ``times`` must be increasing and start at or after ``model.t0``; each
    interval is cut into ``substeps`` exponential steps.  Returns a
    :class:`Trajectory` whose states sit at every internal time node.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 1 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    state = init_particles(model, n, seed)
    eps = sharp_normal_sample(n, model.dim, seed + 1, steps=descent_steps)
    eps -= eps.mean(axis=0)
    rng = np.random.default_rng(seed + 2)
    traj = Trajectory(states=[state], kernel=kernel)
    grid = [state.time]
    for b in times:
        if b <= grid[-1]:
            raise ValueError("snapshot times must exceed t0 and be increasing")
        grid.extend(np.linspace(grid[-1], b, substeps + 1)[1:])
    for t_next in grid[1:]:
        dt = t_next - state.time
        # reusing one well-spread noise sample keeps the quasi-Monte-Carlo
        # regularity; a seeded row permutation per step breaks the coherent
        # accumulation the constant sample would otherwise produce
        eps_step = eps[rng.permutation(n)]
        state, tm = step_forward_fully_discrete(state, model, kernel, dt, eps_step,
                                                reg=reg, augmentation=augmentation,
                                                rng=rng)
        traj.states.append(state)
        traj.transitions.append(tm)
    return traj


def solve_kolmogorov_backward(trajectory, payoff, reg=DEFAULT_REGULARIZATION):
    """Backward fair values and sensitivities along a stored trajectory.

    The terminal condition is the payoff on the final particles; each stored
    transition matrix maps values one time node backward.  Sensitivities are
    the gradients of the kernel interpolant of the values on each cloud.
    Returns (values, gradients): lists aligned with ``trajectory.states``,
    of shapes (N, P) and (N, D, P).
    """
    states = trajectory.states
    if len(states) != len(trajectory.transitions) + 1:
        raise ValueError("trajectory is missing transition matrices")
    last = states[-1]
    P = np.asarray(payoff(last.time, last.particles), dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    values = [P]
    for tm in reversed(trajectory.transitions):
        values.append(tm.matrix @ values[-1])
    values.reverse()
    gradients = []
    for state, val in zip(states, values):
        basis = NodeBasis(state.particles, trajectory.kernel, reg=reg)
        gradients.append(basis.project_gradient(val, state.particles))
    return values, gradients


def _project_rows_to_simplex(M):
    """Euclidean projection of each row onto the probability simplex."""
    n, m = M.shape
    sorted_rows = np.sort(M, axis=1)[:, ::-1]
    csum = np.cumsum(sorted_rows, axis=1) - 1.0
    idx = np.arange(1, m + 1)
    cond = sorted_rows - csum / idx > 0
    rho = m - np.argmax(cond[:, ::-1], axis=1) - 1
    theta = csum[np.arange(n), rho] / (rho + 1.0)
    return np.maximum(M - theta[:, None], 0.0)


def estimate_transition_matrix(kernel, x, y, max_iter=500, tol=1e-10):
    """Row-stochastic matrix best mapping sample ``x`` onto sample ``y``.

    Three stages: center both clouds, reorder ``x`` by a linear sum
    assignment on the kernel pseudo-distance, then projected gradient descent
    of ``|y - Pi x|^2`` over the row-stochastic set starting from the
    identity.  The returned matrix acts on the original (uncentered,
    unordered) ``x``.
    """
    x, y = _as_points(x), _as_points(y)
    if x.shape != y.shape:
        raise ValueError("samples must share shape")
    n = x.shape[0]
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    perm = polar.lsap(pseudo_distance_matrix(kernel, yc, xc))
    xa = xc[perm]
    Pi = np.eye(n)
    lip = np.linalg.norm(xa @ xa.T, 2)
    step = 1.0 / max(lip, np.finfo(float).tiny)
    obj = float(np.sum((Pi @ xa - yc) ** 2))
    for _ in range(max_iter):
        grad = 2.0 * (Pi @ xa - yc) @ xa.T
        Pi_new = _project_rows_to_simplex(Pi - step * grad)
        new_obj = float(np.sum((Pi_new @ xa - yc) ** 2))
        if new_obj > obj + 1e-12:
            step *= 0.5
            if step < 1e-16:
                break
            continue
        done = abs(obj - new_obj) <= tol * max(obj, 1.0)
        Pi, obj = Pi_new, new_obj
        if done:
            break
    full = Pi @ np.eye(n)[perm]
    return TransitionMatrix(full, from_time=np.nan, to_time=np.nan)


def sabr_model(f0=0.03, alpha0=0.1, nu=0.1, beta=1.0, shift=0.0, rho=0.5, t0=0.02):
    """Shifted SABR model: ``dF = alpha (F+s)^beta dW1, dalpha = nu alpha dW2``.

    ``rho`` is the off-diagonal entry of the 2x2 correlation matrix applied
    to the diagonal volatility matrix; zero drift (martingale).  For
    ``beta < 1`` the shifted forward is reflected at zero after each step.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if nu < 0:
        raise ValueError("nu must be nonnegative")
    corr = np.array([[1.0, rho], [rho, 1.0]])
    if np.linalg.eigvalsh(corr)[0] < 0:
        raise ValueError("correlation matrix must be PSD")

    def drift(t, X):
        return np.zeros_like(X)

    def diffusion(t, X):
        F = X[:, 0]
        alpha = X[:, 1]
        base = np.maximum(F + shift, 0.0)
        vols = np.zeros((X.shape[0], 2, 2))
        vols[:, 0, 0] = alpha * base**beta
        vols[:, 1, 1] = nu * alpha
        sigma = corr[None, :, :] @ vols
        return 0.5 * sigma @ np.swapaxes(sigma, 1, 2)

    state_fix = None
    if beta < 1.0:
        def state_fix(X):
            out = X.copy()
            neg = out[:, 0] + shift < 0.0
            out[neg, 0] = -out[neg, 0] - 2.0 * shift
            return out

    return SdeModel(drift=drift, diffusion=diffusion,
                    initial_point=np.array([f0, alpha0]), t0=t0, dim=2,
                    state_fix=state_fix)


def simulate_sabr(params, n, times, seed, kernel=None, substeps=10,
                  reg=DEFAULT_REGULARIZATION):
    """Run the SABR model through the fully discrete scheme.

    ``params`` maps the :func:`sabr_model` keyword names; the kernel defaults
    to a Gaussian at the median scale of the initial particle cloud.
    """
    t0 = min(times)
    model = sabr_model(t0=t0, **params)
    if kernel is None:
        probe = init_particles(model, n, seed)
        kernel = GaussianKernel(median_scale(probe.particles))
    out_times = [t for t in times if t > t0]
    return simulate(model, kernel, n, out_times, seed, substeps=substeps, reg=reg)


def hedge_static(times, fair_values, hedge_values, criterion="variance",
                 budget=None):
    """Static hedge weights minimizing a quadratic criterion over time.

    ``fair_values`` has shape (T, N); ``hedge_values`` has shape (T, N, M).
    The variance criterion centers each time slice across particles before
    accumulating the quadratic form with trapezoid weights in time; the
    sensitivity criterion uses the tables as given, so the caller passes
    sensitivity tables (gradients stacked into the particle axis) instead of
    values.  An optional budget caps ``<alpha, mean hedge value at times[0]>``
    through a single linear constraint solved by its KKT system.
    """
    times = np.asarray(times, dtype=float)
    P = np.asarray(fair_values, dtype=float)
    H = np.asarray(hedge_values, dtype=float)
    if P.ndim != 2 or H.ndim != 3 or P.shape != H.shape[:2]:
        raise ValueError("fair_values (T, N) and hedge_values (T, N, M) must align")
    if len(times) != P.shape[0]:
        raise ValueError("time grid must align with the value tables")
    if criterion not in ("variance", "sensitivity"):
        raise ValueError(f"unknown criterion {criterion!r}")
    if criterion == "variance":
        P = P - P.mean(axis=1, keepdims=True)
        H = H - H.mean(axis=1, keepdims=True)
    if len(times) == 1:
        w = np.ones(1)
    else:
        w = np.empty(len(times))
        w[0] = 0.5 * (times[1] - times[0])
        w[-1] = 0.5 * (times[-1] - times[-2])
        w[1:-1] = 0.5 * (times[2:] - times[:-2])
    n = P.shape[1]
    G = np.einsum("t,tnm,tnk->mk", w, H, H) / n
    b = np.einsum("t,tnm,tn->m", w, H, P) / n
    alpha, *_ = np.linalg.lstsq(G, b, rcond=None)
    if budget is not None:
        hbar = np.asarray(hedge_values, dtype=float)[0].mean(axis=0)
        if alpha @ hbar > budget:
            m = len(alpha)
            kkt = np.zeros((m + 1, m + 1))
            kkt[:m, :m] = G
            kkt[:m, m] = hbar
            kkt[m, :m] = hbar
            rhs = np.concatenate([b, [budget]])
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
            alpha = sol[:m]
    return alpha


def hedge_beta(alpha1, alpha2, beta):
    """Convex combination ``beta * alpha1 + (1 - beta) * alpha2``."""
    a1 = np.asarray(alpha1, dtype=float)
    a2 = np.asarray(alpha2, dtype=float)
    if a1.shape != a2.shape:
        raise ValueError("strategies must have equal length")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    return beta * a1 + (1.0 - beta) * a2
