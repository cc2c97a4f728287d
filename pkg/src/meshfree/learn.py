"""Kernel classification pipelines (extrapolation, projection, matching)
with one-hot encoding, scoring, and IDX-format image ingestion.

The classifiers extrapolate the one-hot label encoding from the training
cloud (optionally through a smaller regression cloud) and predict the argmax
category.  The matching variant picks its regression cloud per category by
descending the discrepancy toward that category's training points.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .approx import descend_discrepancy
from .kernels import _as_points
from .operators import DEFAULT_REGULARIZATION

__all__ = [
    "LabeledSet",
    "KernelClassifier",
    "one_hot",
    "score",
    "fit_predict_extrapolation",
    "fit_predict_projection",
    "fit_predict_matching",
    "read_idx",
    "write_idx",
    "load_idx",
]

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass
class LabeledSet:
    """Point cloud with integer category labels in ``{0..n_categories-1}``."""

    points: np.ndarray
    labels: np.ndarray
    n_categories: int

    def __post_init__(self):
        self.points = _as_points(self.points)
        self.labels = np.asarray(self.labels)
        if self.labels.shape != (self.points.shape[0],):
            raise ValueError("labels must be one integer per point")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.n_categories):
            raise ValueError("labels out of range")

    def __len__(self):
        return self.points.shape[0]

    def subset(self, idx):
        return LabeledSet(self.points[idx], self.labels[idx], self.n_categories)


def one_hot(labels, n_categories):
    """Indicator matrix with exactly one 1 per row."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_categories):
        raise ValueError("labels out of range")
    out = np.zeros((labels.shape[0], n_categories))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def score(predictions, truth):
    """Fraction of matching entries."""
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.shape != truth.shape:
        raise ValueError("length mismatch between predictions and truth")
    if predictions.size == 0:
        raise ValueError("empty prediction set")
    return float(np.mean(predictions == truth))


def _ridge(mat, reg):
    n = mat.shape[0]
    return mat + reg * n * float(np.mean(np.diag(mat))) * np.eye(n)


class KernelClassifier:
    """Argmax classifier over extrapolated one-hot encodings.

    variant "extrapolation" regresses on the full training cloud;
    "projection" on ``n_regressors`` points sampled uniformly without
    replacement (seeded); "matching" picks per-category regressors by a
    sharp-discrepancy descent toward that category's points, then applies the
    projection predictor.  Argmax ties break toward the smallest category id
    (deterministic).
    """

    def __init__(self, kernel, variant="extrapolation", n_regressors=None,
                 reg=DEFAULT_REGULARIZATION, seed=0, descent_steps=20,
                 descent_lr=1.0):
        if variant not in ("extrapolation", "projection", "matching"):
            raise ValueError(f"unknown variant {variant!r}")
        if variant != "extrapolation" and n_regressors is None:
            raise ValueError(f"variant {variant!r} needs n_regressors")
        self.kernel = kernel
        self.variant = variant
        self.n_regressors = n_regressors
        self.reg = reg
        self.seed = seed
        self.descent_steps = descent_steps
        self.descent_lr = descent_lr

    def fit(self, train):
        if len(train) == 0:
            raise ValueError("empty training set")
        X = train.points
        F = one_hot(train.labels, train.n_categories)
        if self.variant == "extrapolation":
            Y = X
        elif self.variant == "projection":
            rng = np.random.default_rng(self.seed)
            idx = rng.choice(len(train), size=min(self.n_regressors, len(train)),
                             replace=False)
            Y = X[idx]
        else:
            Y = self._matching_regressors(train)
        K = self.kernel.gram(X, Y)
        if Y is X:
            self.coefficients_ = np.linalg.solve(_ridge(K, self.reg), F)
        else:
            self.coefficients_ = np.linalg.solve(_ridge(K.T @ K, self.reg), K.T @ F)
        self.regressors_ = Y
        self.n_categories_ = train.n_categories
        return self

    def _matching_regressors(self, train):
        rng = np.random.default_rng(self.seed)
        T = train.n_categories
        base = self.n_regressors // T
        extra = self.n_regressors - base * T
        clouds = []
        for cat in range(T):
            want = base + (1 if cat < extra else 0)
            pts = train.points[train.labels == cat]
            if pts.shape[0] == 0:
                warnings.warn(f"category {cat} empty; skipped", RuntimeWarning,
                              stacklevel=2)
                continue
            take = min(want, pts.shape[0])
            X0 = pts[rng.choice(pts.shape[0], size=take, replace=False)]
            if self.descent_steps > 0:
                trace = descend_discrepancy(self.kernel, pts, X0,
                                            steps=self.descent_steps,
                                            lr=self.descent_lr)
                clouds.append(trace.final)
            else:
                clouds.append(X0)
        if not clouds:
            raise ValueError("all categories empty")
        return np.vstack(clouds)

    def decision_values(self, points):
        points = _as_points(points)
        return self.kernel.gram(points, self.regressors_) @ self.coefficients_

    def predict(self, points):
        points = _as_points(points)
        if points.shape[0] == 0:
            return np.empty(0, dtype=int)
        return np.argmax(self.decision_values(points), axis=1)


def fit_predict_extrapolation(kernel, train, test, reg=DEFAULT_REGULARIZATION):
    """Predict test labels by extrapolating one-hot values from the full train cloud."""
    clf = KernelClassifier(kernel, "extrapolation", reg=reg).fit(train)
    return clf.predict(test)


def fit_predict_projection(kernel, train, n_regressors, test, seed=0,
                           reg=DEFAULT_REGULARIZATION):
    """Predict through a random regression subset of ``n_regressors`` points."""
    clf = KernelClassifier(kernel, "projection", n_regressors=n_regressors,
                           seed=seed, reg=reg).fit(train)
    return clf.predict(test)


def fit_predict_matching(kernel, train, n_regressors, test, seed=0,
                         reg=DEFAULT_REGULARIZATION, descent_steps=20,
                         descent_lr=1.0):
    """Predict through per-category discrepancy-descended regressors."""
    clf = KernelClassifier(kernel, "matching", n_regressors=n_regressors,
                           seed=seed, reg=reg, descent_steps=descent_steps,
                           descent_lr=descent_lr).fit(train)
    return clf.predict(test)


def read_idx(path):
    """Read a big-endian IDX tensor file into a numpy array (ubyte payload)."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) != 4:
            raise ValueError(f"{path}: truncated IDX header")
        zero1, zero2, dtype_code, ndim = struct.unpack(">BBBB", head)
        if zero1 != 0 or zero2 != 0:
            raise ValueError(f"{path}: bad IDX magic {head!r}")
        if dtype_code != 0x08:
            raise ValueError(f"{path}: only ubyte IDX payloads supported")
        raw = fh.read(4 * ndim)
        if len(raw) != 4 * ndim:
            raise ValueError(f"{path}: truncated IDX dimensions")
        dims = struct.unpack(f">{ndim}i", raw)
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    expected = int(np.prod(dims))
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {data.size}")
    return data.reshape(dims)


def write_idx(path, array):
    """Write a ubyte tensor in IDX format (inverse of :func:`read_idx`)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, 0x08, array.ndim))
        fh.write(struct.pack(f">{array.ndim}i", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path, n_categories=10):
    """Load an IDX image/label pair into a :class:`LabeledSet`.

    Images (magic 0x00000803, dims N x rows x cols) are flattened and scaled
    by 1/255 into the unit cube; labels use magic 0x00000801.
    """
    images = read_idx(images_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path}: image file must be rank 3 "
                         f"(magic 0x{IDX_MAGIC_IMAGES:08x})")
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: label file must be rank 1 "
                         f"(magic 0x{IDX_MAGIC_LABELS:08x})")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"image/label count mismatch: {images.shape[0]} vs "
                         f"{labels.shape[0]}")
    points = images.reshape(images.shape[0], -1).astype(float) / 255.0
    return LabeledSet(points, labels.astype(int), n_categories)
