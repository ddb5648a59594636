"""k-nearest neighbours, Gaussian naive Bayes, and a one-vs-rest kernel SVM.

The SVM solves each binary soft-margin dual with SMO using maximal-violating
pair selection (Keerthi et al.); non-PSD kernels (sigmoid) are handled the
way LIBSVM does, by flooring the pair curvature.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from dpkit.errors import ConvergenceWarning, DataError

NBC_VAR_FLOOR = 1e-9
KERNELS = ("linear", "poly", "rbf", "sigmoid")


@dataclass(frozen=True)
class LabeledVectors:
    X: np.ndarray
    y: np.ndarray
    split: str | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise DataError(f"feature matrix must be 2-d, got {X.shape}")
        if y.shape != (X.shape[0],):
            raise DataError(f"{X.shape[0]} rows but {y.shape} labels")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y.astype(np.int64))

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_dataset(cls, ds) -> "LabeledVectors":
        return cls(ds.flat(), ds.labels, ds.split)


def _require_data(train: LabeledVectors):
    if len(train) == 0:
        raise DataError("training set is empty")


# ---------------------------------------------------------------- KNN

def _knn_votes(train: LabeledVectors, query: np.ndarray, k: int) -> int:
    d2 = ((train.X - query) ** 2).sum(axis=1)
    nearest = np.argsort(d2, kind="stable")[:k]
    counts = np.bincount(train.y[nearest])
    # argmax returns the first maximum, i.e. the smallest tied label
    return int(np.argmax(counts))


def knn_classify(train: LabeledVectors, query, k: int = 10) -> int:
    """Majority label among the k nearest training points (Euclidean)."""
    _require_data(train)
    if not 1 <= k <= len(train):
        raise ValueError(f"k must lie in 1..{len(train)}, got {k}")
    query = np.asarray(query, dtype=np.float64).ravel()
    return _knn_votes(train, query, k)


@dataclass
class KNNClassifier:
    k: int = 10
    train: LabeledVectors | None = None

    def fit(self, train: LabeledVectors) -> "KNNClassifier":
        _require_data(train)
        if not 1 <= self.k <= len(train):
            raise ValueError(f"k must lie in 1..{len(train)}, got {self.k}")
        self.train = train
        return self

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return np.array([_knn_votes(self.train, x.ravel(), self.k) for x in X], dtype=np.int64)


# ---------------------------------------------------------------- naive Bayes

@dataclass
class GaussianNB:
    classes: np.ndarray = field(default=None)
    means: np.ndarray = field(default=None)
    variances: np.ndarray = field(default=None)
    log_priors: np.ndarray = field(default=None)
    var_floor: float = NBC_VAR_FLOOR

    def fit(self, train: LabeledVectors) -> "GaussianNB":
        _require_data(train)
        classes = np.unique(train.y)
        means, variances, priors = [], [], []
        for c in classes:
            Xc = train.X[train.y == c]
            if len(Xc) < 1:
                raise DataError(f"class {c} has no samples")
            means.append(Xc.mean(axis=0))
            variances.append(np.maximum(Xc.var(axis=0), self.var_floor))
            priors.append(len(Xc) / len(train))
        self.classes = classes
        self.means = np.array(means)
        self.variances = np.array(variances)
        self.log_priors = np.log(priors)
        return self

    def joint_log_likelihood(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.empty((len(X), len(self.classes)))
        for j in range(len(self.classes)):
            var = self.variances[j]
            ll = -0.5 * (np.log(2 * np.pi * var) + (X - self.means[j]) ** 2 / var)
            out[:, j] = self.log_priors[j] + ll.sum(axis=1)
        return out

    def predict(self, X) -> np.ndarray:
        return self.classes[np.argmax(self.joint_log_likelihood(X), axis=1)]


def nbc_fit(train: LabeledVectors) -> GaussianNB:
    return GaussianNB().fit(train)


def nbc_classify(model: GaussianNB, query) -> int:
    return int(model.predict(np.asarray(query, dtype=np.float64).reshape(1, -1))[0])


# ---------------------------------------------------------------- SVM

@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    degree: int = 3
    gamma: float | None = None
    coef0: float = 0.0

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"unknown kernel {self.kind!r}; expected one of {KERNELS}")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if int(self.degree) != self.degree or self.degree < 1:
            raise ValueError("degree must be a positive integer")

    def resolved_gamma(self, n_features: int) -> float:
        return self.gamma if self.gamma is not None else 1.0 / n_features


def kernel_matrix(A, B, spec: KernelSpec, gamma: float | None = None) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    g = gamma if gamma is not None else spec.resolved_gamma(A.shape[1])
    dot = A @ B.T
    if spec.kind == "linear":
        return dot
    if spec.kind == "poly":
        return (g * dot + spec.coef0) ** spec.degree
    if spec.kind == "sigmoid":
        return np.tanh(g * dot + spec.coef0)
    sq = (A**2).sum(axis=1)[:, None] + (B**2).sum(axis=1)[None, :] - 2.0 * dot
    return np.exp(-g * np.maximum(sq, 0.0))


@dataclass
class BinarySVM:
    alpha: np.ndarray
    y: np.ndarray
    support: np.ndarray
    bias: float
    iterations: int
    converged: bool
    gap: float

    def decision(self, K_query_train: np.ndarray) -> np.ndarray:
        return K_query_train @ (self.alpha * self.y) + self.bias


def smo_binary(K: np.ndarray, y, C: float = 1.0, tol: float = 1e-3,
               max_iter: int = 100_000) -> BinarySVM:
    """Solve ``min 1/2 a^T Q a - sum(a)`` s.t. ``0 <= a <= C``, ``y^T a = 0`` with Q = yy^T * K.

    Stops when the maximal KKT violation ``m(a) - M(a)`` drops below ``tol``.
    """
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.abs(y) == 1):
        raise ValueError("binary labels must be +1/-1")
    if len(np.unique(y)) < 2:
        raise DataError("binary SVM needs both classes present")
    n = len(y)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # Q a - e at a = 0
    diag = np.diag(K)
    tau = 1e-12
    best = (np.inf, alpha.copy(), grad.copy())
    it = 0
    gap = np.inf
    while it < max_iter:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        score = -y * grad
        if not up.any() or not low.any():
            gap = 0.0
            break
        i = int(np.flatnonzero(up)[np.argmax(score[up])])
        j = int(np.flatnonzero(low)[np.argmin(score[low])])
        gap = score[i] - score[j]
        if gap < best[0]:
            best = (gap, alpha.copy(), grad.copy())
        if gap < tol:
            break
        it += 1
        a = diag[i] + diag[j] - 2.0 * K[i, j]
        if a <= 0:
            a = tau
        # move along y_i e_i - y_j e_j, step chosen to reduce the dual objective
        step = gap / a
        ai, aj = alpha[i], alpha[j]
        # feasible step keeps both in the box
        lim_i = C - ai if y[i] > 0 else ai
        lim_j = aj if y[j] > 0 else C - aj
        step = min(step, lim_i, lim_j)
        alpha[i] = ai + y[i] * step
        alpha[j] = aj - y[j] * step
        alpha[i] = min(max(alpha[i], 0.0), C)
        alpha[j] = min(max(alpha[j], 0.0), C)
        di, dj = alpha[i] - ai, alpha[j] - aj
        grad += y * (K[:, i] * y[i] * di + K[:, j] * y[j] * dj)
    converged = gap < tol
    if not converged:
        warnings.warn(f"SMO stopped after {it} iterations with KKT gap {gap:.3g}; "
                      "returning the best iterate", ConvergenceWarning, stacklevel=2)
        gap, alpha, grad = best
    bias = _bias(alpha, grad, y, C)
    return BinarySVM(alpha, y, np.flatnonzero(alpha > 0), bias, it, converged, float(gap))


def _bias(alpha, grad, y, C):
    free = (alpha > 0) & (alpha < C)
    yg = y * grad
    if free.any():
        rho = yg[free].mean()
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        ub = yg[up].min() if up.any() else np.inf
        lb = yg[low].max() if low.any() else -np.inf
        if np.isfinite(ub) and np.isfinite(lb):
            rho = 0.5 * (ub + lb)
        else:
            rho = ub if np.isfinite(ub) else lb
    return float(-rho)


@dataclass
class SVMClassifier:
    """One-vs-rest soft-margin kernel SVM."""

    kernel: KernelSpec = field(default_factory=KernelSpec)
    C: float = 1.0
    tol: float = 1e-3
    max_iter: int = 100_000
    classes: np.ndarray = None
    machines: list = None
    X_train: np.ndarray = None
    gamma: float = None

    def fit(self, train: LabeledVectors) -> "SVMClassifier":
        _require_data(train)
        classes = np.unique(train.y)
        if len(classes) < 2:
            raise DataError("SVM needs at least 2 classes")
        self.gamma = self.kernel.resolved_gamma(train.X.shape[1])
        K = kernel_matrix(train.X, train.X, self.kernel, self.gamma)
        self.classes = classes
        self.X_train = train.X
        self.machines = [
            smo_binary(K, np.where(train.y == c, 1.0, -1.0), self.C, self.tol, self.max_iter)
            for c in classes
        ]
        return self

    def decision_function(self, X) -> np.ndarray:
        Kq = kernel_matrix(X, self.X_train, self.kernel, self.gamma)
        return np.stack([m.decision(Kq) for m in self.machines], axis=1)

    def predict(self, X) -> np.ndarray:
        return self.classes[np.argmax(self.decision_function(X), axis=1)]

    def metadata(self) -> dict:
        return {"kernel": self.kernel.kind, "C": self.C, "gamma": self.gamma,
                "degree": self.kernel.degree, "coef0": self.kernel.coef0}


def svm_fit(train: LabeledVectors, kernel: KernelSpec = KernelSpec(), C_reg: float = 1.0,
            max_iter: int = 100_000) -> SVMClassifier:
    return SVMClassifier(kernel, C_reg, max_iter=max_iter).fit(train)


def svm_classify(model: SVMClassifier, query) -> int:
    return int(model.predict(np.asarray(query, dtype=np.float64).reshape(1, -1))[0])


# ---------------------------------------------------------------- evaluation

def evaluate(model, split: LabeledVectors) -> dict:
    """Accuracy and loss, where loss is the misclassification rate (1 - accuracy)."""
    if len(split) == 0:
        raise DataError("cannot evaluate on an empty split")
    pred = np.asarray(model.predict(split.X))
    correct = int(np.sum(pred == split.y))
    accuracy = correct / len(split)
    return {"accuracy": accuracy, "loss": 1.0 - accuracy, "correct": correct, "n": len(split)}
