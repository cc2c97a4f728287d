"""Admissible kernels: evaluation, analytic gradients, compositions, Gram matrices.

A kernel here is a symmetric function ``k(x, y)`` whose Gram matrix on any set
of distinct points is positive semi-definite (positive definite up to
regularization for the conditionally-definite families).  Every kernel knows
its gradient with respect to the *first* argument, which is what the discrete
operator formulas consume.  Kernels are immutable after construction and all
methods are pure.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, erfinv

__all__ = [
    "Kernel",
    "GaussianKernel",
    "MaternKernel",
    "PeriodicGaussianKernel",
    "CosineKernel",
    "ReluKernel",
    "LinearRegressionKernel",
    "SumKernel",
    "ProductKernel",
    "TensorKernel",
    "TransportedKernel",
    "CoordinateMap",
    "erfinv_unit_map",
    "combine",
    "compose_transport",
    "eval_kernel",
    "eval_kernel_gradient",
    "gram",
    "pseudo_distance",
    "pseudo_distance_matrix",
    "median_scale",
    "kernel_from_config",
    "kernel_to_config",
]

# Margin used when clamping coordinates into the open unit interval before
# applying erfinv, which diverges at 0 and 1.
TRANSPORT_CLAMP = 1e-9


def _as_points(x):
    """Coerce ``x`` to a 2-D float array of shape (n, d)."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"expected point array of shape (n, d), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("points must have finite coordinates")
    return a


def _sqdist(X, Y):
    """Pairwise squared Euclidean distances, clipped at zero."""
    x2 = np.sum(X * X, axis=1)[:, None]
    y2 = np.sum(Y * Y, axis=1)[None, :]
    d2 = x2 + y2 - 2.0 * (X @ Y.T)
    return np.maximum(d2, 0.0)


class Kernel:
    """Base class for admissible kernels.

    Subclasses implement :meth:`gram` and :meth:`grad_gram`; everything else
    (scalar evaluation, pseudo-distance, serialization) derives from those.
    ``dim`` is ``None`` for kernels valid in any dimension, otherwise the
    required coordinate dimension.
    """

    dim = None

    def gram(self, X, Y):
        """Gram matrix ``K[n, m] = k(X[n], Y[m])`` of shape (N, M)."""
        raise NotImplementedError

    def grad_gram(self, X, Y):
        """Gradient Gram ``G[n, m, :] = grad_x k(x, y)|_{x=X[n], y=Y[m]}``, shape (N, M, D)."""
        raise NotImplementedError

    def _check_dims(self, X, Y):
        if X.shape[1] != Y.shape[1]:
            raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
        if self.dim is not None and X.shape[1] != self.dim:
            raise ValueError(f"kernel expects dimension {self.dim}, got {X.shape[1]}")

    def __call__(self, x, y):
        X, Y = _as_points(x), _as_points(y)
        return float(self.gram(X, Y)[0, 0])

    def gradient(self, x, y):
        X, Y = _as_points(x), _as_points(y)
        return self.grad_gram(X, Y)[0, 0]

    def diag(self, X):
        """Vector of ``k(x, x)`` over the rows of ``X``."""
        X = _as_points(X)
        out = np.empty(X.shape[0])
        step = 512
        for i in range(0, X.shape[0], step):
            chunk = X[i:i + step]
            out[i:i + chunk.shape[0]] = np.einsum("ii->i", self.gram(chunk, chunk))
        return out

    def to_config(self):
        raise NotImplementedError(f"{type(self).__name__} is not serializable")


class GaussianKernel(Kernel):
    """``k(x, y) = amplitude * exp(-scale * |x - y|^2)``."""

    def __init__(self, scale=1.0, amplitude=1.0):
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.scale = float(scale)
        self.amplitude = float(amplitude)

    def gram(self, X, Y):
        self._check_dims(X, Y)
        return self.amplitude * np.exp(-self.scale * _sqdist(X, Y))

    def grad_gram(self, X, Y):
        K = self.gram(X, Y)
        diff = X[:, None, :] - Y[None, :, :]
        return -2.0 * self.scale * diff * K[:, :, None]

    def to_config(self):
        return {"type": "gaussian", "scale": self.scale, "amplitude": self.amplitude,
                "transport": None}


class MaternKernel(Kernel):
    """Matern kernel with smoothness ``nu`` in {0.5, 1.5, 2.5} and length scale ``scale``.

    ``nu=1.5`` (the default) is once differentiable, which is the minimum
    needed by the gradient-based discrete operators; the ``nu=0.5``
    exponential kernel has a kink at coincident points where the gradient is
    returned as the one-sided value 0.
    """

    def __init__(self, scale=1.0, nu=1.5, amplitude=1.0):
        if scale <= 0:
            raise ValueError("scale must be positive")
        if nu not in (0.5, 1.5, 2.5):
            raise ValueError("nu must be one of 0.5, 1.5, 2.5")
        self.scale = float(scale)
        self.nu = float(nu)
        self.amplitude = float(amplitude)

    def gram(self, X, Y):
        self._check_dims(X, Y)
        r = np.sqrt(_sqdist(X, Y)) / self.scale
        if self.nu == 0.5:
            K = np.exp(-r)
        elif self.nu == 1.5:
            s = np.sqrt(3.0) * r
            K = (1.0 + s) * np.exp(-s)
        else:
            s = np.sqrt(5.0) * r
            K = (1.0 + s + s * s / 3.0) * np.exp(-s)
        return self.amplitude * K

    def grad_gram(self, X, Y):
        diff = X[:, None, :] - Y[None, :, :]
        r2 = _sqdist(X, Y)
        r = np.sqrt(r2)
        if self.nu == 0.5:
            # radial derivative -exp(-r/s)/s; one-sided value 0 at r = 0
            with np.errstate(divide="ignore", invalid="ignore"):
                fac = np.where(r > 0.0, -np.exp(-r / self.scale) / (self.scale * r), 0.0)
        elif self.nu == 1.5:
            fac = -(3.0 / self.scale**2) * np.exp(-np.sqrt(3.0) * r / self.scale)
        else:
            s = np.sqrt(5.0) * r / self.scale
            fac = -(5.0 / (3.0 * self.scale**2)) * (1.0 + s) * np.exp(-s)
        return self.amplitude * fac[:, :, None] * diff

    def to_config(self):
        return {"type": "matern", "scale": self.scale, "nu": self.nu,
                "amplitude": self.amplitude, "transport": None}


class PeriodicGaussianKernel(Kernel):
    """Wrapped Gaussian, product over coordinates.

    One-dimensional factor ``w(t) = sum_j exp(-scale * (t + j*period)^2)`` for
    ``|j| <= terms``; the kernel is ``amplitude * prod_d w(x_d - y_d)``.  Its
    RKHS contains ``period``-periodic functions, so the period should cover
    the data range when non-periodic components matter.
    """

    def __init__(self, scale=1.0, period=1.0, amplitude=1.0, terms=3):
        if scale <= 0 or period <= 0:
            raise ValueError("scale and period must be positive")
        self.scale = float(scale)
        self.period = float(period)
        self.amplitude = float(amplitude)
        self.terms = int(terms)

    def _factors(self, T):
        # T: (..., ) coordinate differences; returns w(T), w'(T)
        j = np.arange(-self.terms, self.terms + 1, dtype=float) * self.period
        shifted = T[..., None] + j
        e = np.exp(-self.scale * shifted**2)
        w = e.sum(axis=-1)
        dw = (-2.0 * self.scale * shifted * e).sum(axis=-1)
        return w, dw

    def gram(self, X, Y):
        self._check_dims(X, Y)
        diff = X[:, None, :] - Y[None, :, :]
        w, _ = self._factors(diff)
        return self.amplitude * np.prod(w, axis=-1)

    def grad_gram(self, X, Y):
        diff = X[:, None, :] - Y[None, :, :]
        w, dw = self._factors(diff)
        prod = np.prod(w, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(w != 0.0, dw / w, 0.0)
        return self.amplitude * prod[:, :, None] * ratio

    def to_config(self):
        return {"type": "periodic-gaussian", "scale": self.scale,
                "period": self.period, "amplitude": self.amplitude,
                "terms": self.terms, "transport": None}


class CosineKernel(Kernel):
    """Truncated-harmonic periodic kernel, product over coordinates.

    One-dimensional factor ``w(t) = weights[0] + sum_k weights[k] *
    cos(2 pi k t / period)`` with nonnegative weights; positive semi-definite
    with finitely many Fourier modes per coordinate, hence rank-deficient:
    Gram regularization is required, as for the linear-regression kernel.
    """

    def __init__(self, period=1.0, weights=(0.5, 0.5), amplitude=1.0):
        if period <= 0:
            raise ValueError("period must be positive")
        weights = np.asarray(weights, dtype=float)
        if weights.ndim != 1 or weights.size < 2 or np.any(weights < 0):
            raise ValueError("weights must be a nonnegative vector [c0, w1, ...]")
        self.period = float(period)
        self.weights = weights
        self.amplitude = float(amplitude)

    def _phases(self, diff):
        k = np.arange(1, self.weights.size, dtype=float)
        return (2.0 * np.pi / self.period) * diff[..., None] * k

    def _factors(self, diff):
        ph = self._phases(diff)
        w = self.weights[0] + np.cos(ph) @ self.weights[1:]
        k = np.arange(1, self.weights.size, dtype=float)
        dw = -(2.0 * np.pi / self.period) * (np.sin(ph) @ (self.weights[1:] * k))
        return w, dw

    def gram(self, X, Y):
        self._check_dims(X, Y)
        diff = X[:, None, :] - Y[None, :, :]
        w, _ = self._factors(diff)
        return self.amplitude * np.prod(w, axis=-1)

    def grad_gram(self, X, Y):
        diff = X[:, None, :] - Y[None, :, :]
        w, dw = self._factors(diff)
        prod = np.prod(w, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(w != 0.0, dw / w, 0.0)
        return self.amplitude * prod[:, :, None] * ratio

    def to_config(self):
        return {"type": "cosine", "scale": self.period,
                "weights": list(self.weights), "amplitude": self.amplitude,
                "transport": None}


class ReluKernel(Kernel):
    """Hat kernel ``k(x, y) = max(0, 1 - |x - y| / scale)``.

    Positive definite on the line, only conditionally so in higher dimension;
    Gram regularization makes it usable there.  The gradient at the kinks
    (coincident points and the support edge) is the documented one-sided
    value 0.
    """

    def __init__(self, scale=1.0, amplitude=1.0):
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.scale = float(scale)
        self.amplitude = float(amplitude)

    def gram(self, X, Y):
        self._check_dims(X, Y)
        r = np.sqrt(_sqdist(X, Y))
        return self.amplitude * np.maximum(0.0, 1.0 - r / self.scale)

    def grad_gram(self, X, Y):
        diff = X[:, None, :] - Y[None, :, :]
        r = np.sqrt(_sqdist(X, Y))
        inside = (r > 0.0) & (r < self.scale)
        with np.errstate(divide="ignore", invalid="ignore"):
            fac = np.where(inside, -1.0 / (self.scale * np.where(r > 0, r, 1.0)), 0.0)
        return self.amplitude * fac[:, :, None] * diff

    def to_config(self):
        return {"type": "relu", "scale": self.scale, "amplitude": self.amplitude,
                "transport": None}


class LinearRegressionKernel(Kernel):
    """Affine kernel ``k(x, y) = offset + x . y`` (conditionally definite)."""

    def __init__(self, offset=1.0, amplitude=1.0):
        self.offset = float(offset)
        self.amplitude = float(amplitude)

    def gram(self, X, Y):
        self._check_dims(X, Y)
        return self.amplitude * (self.offset + X @ Y.T)

    def grad_gram(self, X, Y):
        N, M = X.shape[0], Y.shape[0]
        return self.amplitude * np.broadcast_to(Y[None, :, :], (N, M, Y.shape[1])).copy()

    def to_config(self):
        return {"type": "linear-regression", "scale": self.offset,
                "amplitude": self.amplitude, "transport": None}


class SumKernel(Kernel):
    """Pointwise sum of two kernels."""

    def __init__(self, k1, k2):
        self.k1, self.k2 = k1, k2
        self.dim = k1.dim if k1.dim is not None else k2.dim

    def gram(self, X, Y):
        return self.k1.gram(X, Y) + self.k2.gram(X, Y)

    def grad_gram(self, X, Y):
        return self.k1.grad_gram(X, Y) + self.k2.grad_gram(X, Y)

    def to_config(self):
        return {"type": "sum", "transport": None,
                "children": [self.k1.to_config(), self.k2.to_config()]}


class ProductKernel(Kernel):
    """Pointwise product of two kernels."""

    def __init__(self, k1, k2):
        self.k1, self.k2 = k1, k2
        self.dim = k1.dim if k1.dim is not None else k2.dim

    def gram(self, X, Y):
        return self.k1.gram(X, Y) * self.k2.gram(X, Y)

    def grad_gram(self, X, Y):
        K1, K2 = self.k1.gram(X, Y), self.k2.gram(X, Y)
        G1, G2 = self.k1.grad_gram(X, Y), self.k2.grad_gram(X, Y)
        return G1 * K2[:, :, None] + G2 * K1[:, :, None]

    def to_config(self):
        return {"type": "product", "transport": None,
                "children": [self.k1.to_config(), self.k2.to_config()]}


class TensorKernel(Kernel):
    """Product kernel over a split of the coordinates.

    ``k((x1, x2), (y1, y2)) = k1(x1, y1) * k2(x2, y2)`` where the first
    ``split`` coordinates feed ``k1`` and the rest feed ``k2``.
    """

    def __init__(self, k1, k2, split):
        self.k1, self.k2 = k1, k2
        self.split = int(split)
        if k1.dim is not None and k1.dim != self.split:
            raise ValueError("k1 dimension incompatible with split")

    def _blocks(self, X):
        return X[:, : self.split], X[:, self.split:]

    def gram(self, X, Y):
        self._check_dims(X, Y)
        X1, X2 = self._blocks(X)
        Y1, Y2 = self._blocks(Y)
        return self.k1.gram(X1, Y1) * self.k2.gram(X2, Y2)

    def grad_gram(self, X, Y):
        X1, X2 = self._blocks(X)
        Y1, Y2 = self._blocks(Y)
        K1, K2 = self.k1.gram(X1, Y1), self.k2.gram(X2, Y2)
        G1, G2 = self.k1.grad_gram(X1, Y1), self.k2.grad_gram(X2, Y2)
        out = np.empty((X.shape[0], Y.shape[0], X.shape[1]))
        out[:, :, : self.split] = G1 * K2[:, :, None]
        out[:, :, self.split:] = G2 * K1[:, :, None]
        return out

    def to_config(self):
        return {"type": "tensor", "split": self.split, "transport": None,
                "children": [self.k1.to_config(), self.k2.to_config()]}


class CoordinateMap:
    """Coordinatewise map with vectorized value and derivative functions."""

    def __init__(self, fn, deriv, name=None, domain=None):
        self.fn = fn
        self.deriv = deriv
        self.name = name
        self.domain = domain  # (lo, hi) open interval, or None

    def __call__(self, X):
        return self.fn(self._clamped(X))

    def jacobian_diag(self, X):
        return self.deriv(self._clamped(X))

    def _clamped(self, X):
        if self.domain is None:
            return X
        lo, hi = self.domain
        return np.clip(X, lo + TRANSPORT_CLAMP, hi - TRANSPORT_CLAMP)

    def check_domain(self, X):
        """Raise if coordinates fall outside the closed domain (before clamping)."""
        if self.domain is None:
            return
        lo, hi = self.domain
        if np.any(X < lo) or np.any(X > hi):
            raise ValueError(
                f"coordinates outside transport domain [{lo}, {hi}]")


def erfinv_unit_map():
    """Map ``u -> erfinv(2u - 1)`` sending (0, 1) onto the real line."""
    def fn(U):
        return erfinv(2.0 * U - 1.0)

    def deriv(U):
        # d/du erfinv(2u-1) = sqrt(pi) * exp(erfinv(2u-1)^2)
        v = erfinv(2.0 * U - 1.0)
        return np.sqrt(np.pi) * np.exp(v * v)

    return CoordinateMap(fn, deriv, name="erfinv", domain=(0.0, 1.0))


def identity_map():
    return CoordinateMap(lambda X: X, lambda X: np.ones_like(X), name="identity")


class TransportedKernel(Kernel):
    """Kernel composed with a map: ``(k o S)(x, y) = k(S(x), S(y))``.

    The gradient follows by the chain rule with the map's Jacobian.  Maps can
    be coordinatewise (:class:`CoordinateMap`) or any object providing
    ``__call__`` and either ``jacobian_diag`` (N, D) or ``jacobian`` (N, D, D).
    """

    def __init__(self, inner, transport):
        self.inner = inner
        self.transport = transport
        self.dim = inner.dim

    def gram(self, X, Y):
        self._check_dims(X, Y)
        return self.inner.gram(self.transport(X), self.transport(Y))

    def grad_gram(self, X, Y):
        G = self.inner.grad_gram(self.transport(X), self.transport(Y))
        if hasattr(self.transport, "jacobian_diag"):
            J = self.transport.jacobian_diag(X)  # (N, D)
            return G * J[:, None, :]
        J = self.transport.jacobian(X)  # (N, D, D), J[n, i, j] = d S_i / d x_j
        return np.einsum("nij,nmi->nmj", J, G)

    def to_config(self):
        name = getattr(self.transport, "name", None)
        if name != "erfinv":
            raise NotImplementedError("only the erfinv transport is serializable")
        cfg = self.inner.to_config()
        cfg["transport"] = "erfinv"
        return cfg


def combine(kind, k1, k2, split=None):
    """Combine two kernels by ``"sum"``, ``"product"`` or ``"tensor"``."""
    if kind == "sum":
        return SumKernel(k1, k2)
    if kind == "product":
        return ProductKernel(k1, k2)
    if kind == "tensor":
        if split is None:
            raise ValueError("tensor combination needs a coordinate split")
        return TensorKernel(k1, k2, split)
    raise ValueError(f"unknown combination kind {kind!r}")


def compose_transport(kernel, transport):
    """Kernel evaluating ``kernel(transport(x), transport(y))``."""
    return TransportedKernel(kernel, transport)


def eval_kernel(kernel, x, y):
    """Evaluate ``k(x, y)`` at two points."""
    return kernel(x, y)


def eval_kernel_gradient(kernel, x, y):
    """Gradient of ``k`` with respect to the first argument, at two points."""
    return kernel.gradient(x, y)


def gram(kernel, X, Y=None):
    """Gram matrix of ``kernel`` between two point clouds (Y defaults to X)."""
    X = _as_points(X)
    Y = X if Y is None else _as_points(Y)
    return kernel.gram(X, Y)


def pseudo_distance(kernel, x, y):
    """``D(x, y) = k(x, x) + k(y, y) - 2 k(x, y)``, nonnegative for admissible kernels."""
    return kernel(x, x) + kernel(y, y) - 2.0 * kernel(x, y)


def pseudo_distance_matrix(kernel, X, Y):
    """Matrix ``D[n, m]`` of pairwise pseudo-distances."""
    X, Y = _as_points(X), _as_points(Y)
    return kernel.diag(X)[:, None] + kernel.diag(Y)[None, :] - 2.0 * kernel.gram(X, Y)


def median_scale(X, rng=None, max_pairs=2000):
    """Median-heuristic Gaussian scale ``1 / (2 median^2)`` of pairwise distances."""
    X = _as_points(X)
    n = X.shape[0]
    if n < 2:
        return 1.0
    if n * (n - 1) // 2 > max_pairs:
        rng = np.random.default_rng(0) if rng is None else rng
        i = rng.integers(0, n, size=max_pairs)
        j = rng.integers(0, n, size=max_pairs)
        keep = i != j
        d = np.linalg.norm(X[i[keep]] - X[j[keep]], axis=1)
    else:
        d = np.sqrt(_sqdist(X, X)[np.triu_indices(n, k=1)])
    med = np.median(d)
    if med <= 0:
        return 1.0
    return 1.0 / (2.0 * med * med)


_SIMPLE_TYPES = {
    "gaussian": lambda cfg: GaussianKernel(cfg.get("scale", 1.0), cfg.get("amplitude", 1.0)),
    "matern": lambda cfg: MaternKernel(cfg.get("scale", 1.0), cfg.get("nu", 1.5),
                                       cfg.get("amplitude", 1.0)),
    "periodic-gaussian": lambda cfg: PeriodicGaussianKernel(
        cfg.get("scale", 1.0), cfg.get("period", 1.0), cfg.get("amplitude", 1.0),
        cfg.get("terms", 3)),
    "relu": lambda cfg: ReluKernel(cfg.get("scale", 1.0), cfg.get("amplitude", 1.0)),
    "cosine": lambda cfg: CosineKernel(cfg.get("scale", 1.0), cfg.get("floor", 0.5),
                                       cfg.get("amplitude", 1.0)),
    "linear-regression": lambda cfg: LinearRegressionKernel(
        cfg.get("scale", 1.0), cfg.get("amplitude", 1.0)),
}


def kernel_from_config(cfg):
    """Build a kernel from a JSON-style configuration object.

    The schema is ``{"type": ..., "scale": C, "transport": "erfinv"|null,
    "children": [...]}`` with optional per-type extras (``amplitude``,
    ``period``, ``nu``, ``terms``, ``split``).
    """
    ctype = cfg["type"]
    if ctype in _SIMPLE_TYPES:
        k = _SIMPLE_TYPES[ctype](cfg)
    elif ctype in ("sum", "product"):
        c1, c2 = cfg["children"]
        k = combine(ctype, kernel_from_config(c1), kernel_from_config(c2))
    elif ctype == "tensor":
        c1, c2 = cfg["children"]
        k = combine("tensor", kernel_from_config(c1), kernel_from_config(c2),
                    split=cfg["split"])
    else:
        raise ValueError(f"unknown kernel type {ctype!r}")
    if cfg.get("transport") == "erfinv":
        k = TransportedKernel(k, erfinv_unit_map())
    elif cfg.get("transport") not in (None, ""):
        raise ValueError(f"unknown transport {cfg['transport']!r}")
    return k


def kernel_to_config(kernel):
    """Inverse of :func:`kernel_from_config` for serializable kernels."""
    return kernel.to_config()
