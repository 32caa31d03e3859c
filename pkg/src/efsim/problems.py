"""Desk-scale objectives with exact and stochastic gradients.

All problems expose: dim, n_samples, loss(x), full_gradient(x),
batch_gradient(x, idx) with idx drawn uniformly with replacement, and
eval_metric(x) (None where not meaningful). Stochastic gradients are
exactly unbiased for the full gradient when batches are uniform over
all samples; with equal worker shards the across-worker mean stays
exactly unbiased.
"""

from __future__ import annotations

import numpy as np

from .rng import RngStream


class LeastSquares:
    """0.5 * ||A x - y||^2 with A n x d, d >> n, and a planted zero-loss
    solution in the row space of A (so the zero-loss set is nonempty)."""

    def __init__(self, a: np.ndarray, y: np.ndarray):
        self.a = a
        self.y = y
        self.n_samples, self.dim = a.shape
        # orthonormal row-space basis, d x n
        q, _ = np.linalg.qr(a.T)
        self.basis = q

    def loss(self, x: np.ndarray) -> float:
        r = self.a @ x - self.y
        return 0.5 * float(r @ r)

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        return self.a.T @ (self.a @ x - self.y)

    def batch_gradient(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        # (n/|B|) * sum_{i in B} a_i (a_i^T x - y_i): unbiased for the sum-form loss
        rows = self.a[idx]
        return (self.n_samples / len(idx)) * (rows.T @ (rows @ x - self.y[idx]))

    def eval_metric(self, x: np.ndarray) -> float | None:
        return None

    def rowspace_residual(self, v: np.ndarray) -> float:
        """||v - P v|| for the projector P onto the row space of A."""
        return float(np.linalg.norm(v - self.basis @ (self.basis.T @ v)))

    def min_norm_solution(self) -> np.ndarray:
        return self.a.T @ np.linalg.solve(self.a @ self.a.T, self.y)


def make_least_squares(n: int, d: int, seed: int, solution_norm: float = 1.0
                       ) -> LeastSquares:
    """Gaussian A scaled by 1/sqrt(n) (keeps the Hessian spectrum O(d/n));
    y = A @ x_plant with x_plant planted in the row space."""
    if not 1 <= n < d:
        raise ValueError(f"need d > n >= 1, got n={n}, d={d}")
    s = RngStream(seed, stream_id=0xA)
    a = s.normals(n * d).reshape(n, d) / np.sqrt(n)
    coeffs = s.normals(n)
    x_plant = a.T @ coeffs
    x_plant *= solution_norm / np.linalg.norm(x_plant)
    return LeastSquares(a, a @ x_plant)


class LogisticRegression:
    """Mean logistic loss on +-1 labels from a noisy linear teacher."""

    def __init__(self, x: np.ndarray, labels: np.ndarray):
        self.x = x
        self.labels = labels
        self.n_samples, self.dim = x.shape

    def _margins(self, w: np.ndarray, idx=slice(None)) -> np.ndarray:
        return self.labels[idx] * (self.x[idx] @ w)

    def loss(self, w: np.ndarray) -> float:
        return float(np.mean(np.logaddexp(0.0, -self._margins(w))))

    def full_gradient(self, w: np.ndarray) -> np.ndarray:
        return self._grad(w, np.arange(self.n_samples))

    def batch_gradient(self, w: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return self._grad(w, idx)

    def _grad(self, w: np.ndarray, idx: np.ndarray) -> np.ndarray:
        m = self._margins(w, idx)
        coef = -self.labels[idx] / (1.0 + np.exp(m))
        return (self.x[idx].T @ coef) / len(idx)

    def eval_metric(self, w: np.ndarray) -> float:
        """Training accuracy."""
        return float(np.mean(np.sign(self.x @ w) == self.labels))


def make_logreg(n: int, d: int, seed: int, flip: float = 0.05) -> LogisticRegression:
    s = RngStream(seed, stream_id=0xB)
    x = s.normals(n * d).reshape(n, d)
    teacher = s.normals(d)
    teacher /= np.linalg.norm(teacher)
    labels = np.where(x @ teacher >= 0, 1.0, -1.0)
    labels[s.uniforms(n) < flip] *= -1.0
    return LogisticRegression(x, labels)


class TanhMLP:
    """Two tanh hidden layers + softmax cross-entropy on synthetic
    class clusters; parameters live in one flat vector."""

    def __init__(self, x: np.ndarray, labels: np.ndarray, hidden: tuple[int, int]):
        self.x = x
        self.labels = labels.astype(np.int64)
        self.n_samples, self.in_dim = x.shape
        self.n_classes = int(labels.max()) + 1
        h1, h2 = hidden
        self.shapes = [
            (self.in_dim, h1), (h1,),
            (h1, h2), (h2,),
            (h2, self.n_classes), (self.n_classes,),
        ]
        self.dim = sum(int(np.prod(s)) for s in self.shapes)

    def init_params(self, stream: RngStream) -> np.ndarray:
        parts = []
        for shape in self.shapes:
            scale = 1.0 / np.sqrt(shape[0]) if len(shape) == 2 else 0.0
            parts.append(scale * stream.normals(int(np.prod(shape))))
        return np.concatenate(parts)

    def _unpack(self, theta: np.ndarray) -> list[np.ndarray]:
        out, pos = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            out.append(theta[pos : pos + size].reshape(shape))
            pos += size
        return out

    def _forward(self, theta, idx):
        w1, b1, w2, b2, w3, b3 = self._unpack(theta)
        x = self.x[idx]
        a1 = np.tanh(x @ w1 + b1)
        a2 = np.tanh(a1 @ w2 + b2)
        logits = a2 @ w3 + b3
        logits -= logits.max(axis=1, keepdims=True)
        expz = np.exp(logits)
        probs = expz / expz.sum(axis=1, keepdims=True)
        return x, a1, a2, probs

    def loss(self, theta: np.ndarray, idx=None) -> float:
        idx = np.arange(self.n_samples) if idx is None else idx
        _, _, _, probs = self._forward(theta, idx)
        picked = probs[np.arange(len(idx)), self.labels[idx]]
        return float(-np.mean(np.log(picked + 1e-300)))

    def full_gradient(self, theta: np.ndarray) -> np.ndarray:
        return self.batch_gradient(theta, np.arange(self.n_samples))

    def batch_gradient(self, theta: np.ndarray, idx: np.ndarray) -> np.ndarray:
        w1, b1, w2, b2, w3, b3 = self._unpack(theta)
        x, a1, a2, probs = self._forward(theta, idx)
        b = len(idx)
        dlogits = probs.copy()
        dlogits[np.arange(b), self.labels[idx]] -= 1.0
        dlogits /= b
        gw3 = a2.T @ dlogits
        gb3 = dlogits.sum(axis=0)
        da2 = (dlogits @ w3.T) * (1.0 - a2**2)
        gw2 = a1.T @ da2
        gb2 = da2.sum(axis=0)
        da1 = (da2 @ w2.T) * (1.0 - a1**2)
        gw1 = x.T @ da1
        gb1 = da1.sum(axis=0)
        return np.concatenate([g.ravel() for g in (gw1, gb1, gw2, gb2, gw3, gb3)])

    def eval_metric(self, theta: np.ndarray) -> float:
        _, _, _, probs = self._forward(theta, np.arange(self.n_samples))
        return float(np.mean(probs.argmax(axis=1) == self.labels))


def make_mlp(hidden: tuple[int, int] = (16, 16), seed: int = 0, n: int = 256,
             in_dim: int = 8, n_classes: int = 4) -> TanhMLP:
    """Gaussian class clusters; total parameter count stays small."""
    s = RngStream(seed, stream_id=0xC)
    centers = 2.0 * s.normals(n_classes * in_dim).reshape(n_classes, in_dim)
    labels = np.arange(n) % n_classes
    x = centers[labels] + s.normals(n * in_dim).reshape(n, in_dim)
    mlp = TanhMLP(x, labels, hidden)
    if mlp.dim > 10**5:
        raise ValueError("parameter budget exceeded")
    return mlp


def finite_diff_check(problem, x: np.ndarray, coords, h: float = 1e-4) -> float:
    """Max over coords of |analytic - central difference| / (|analytic| + h)."""
    if h <= 0:
        raise ValueError("h must be positive")
    grad = problem.full_gradient(x)
    worst = 0.0
    for c in coords:
        e = np.zeros_like(x)
        e[c] = h
        fd = (problem.loss(x + e) - problem.loss(x - e)) / (2 * h)
        worst = max(worst, abs(grad[c] - fd) / (abs(grad[c]) + h))
    return worst


def shard_indices(n_samples: int, workers: int) -> list[np.ndarray]:
    """Contiguous shards partitioning range(n_samples)."""
    bounds = np.linspace(0, n_samples, workers + 1).astype(int)
    return [np.arange(bounds[i], bounds[i + 1]) for i in range(workers)]
