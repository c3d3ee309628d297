"""Soft-margin RBF support vector machine trained with SMO."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from core.features import FeatureVector, Label
from utils.logger import log

TAU = 1e-12
PRUNE_ALPHA = 1e-8


@dataclass(frozen=True)
class SvmConfig:
    """Kernel machine settings (C=1000, gamma=1 by default)."""

    c: float = 1000.0
    gamma: float = 1.0
    tol: float = 1e-3
    max_passes: int = 10
    max_iters: int | None = None  # None: 100 * n_samples

    def __post_init__(self) -> None:
        if self.c <= 0:
            raise ValueError(f"C must be > 0, got {self.c}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.tol <= 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.max_passes < 1:
            raise ValueError(f"max_passes must be >= 1, got {self.max_passes}")


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    """K[i, j] = exp(-gamma * ||a_i - b_j||^2), computed from explicit differences."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    diff = a[:, None, :] - b[None, :, :]
    return np.exp(-gamma * np.einsum("ijk,ijk->ij", diff, diff))


@dataclass(frozen=True, eq=False)
class SvmModel:
    support_vectors: np.ndarray
    dual_coefs: np.ndarray
    bias: float
    config: SvmConfig

    @property
    def n_features(self) -> int:
        return int(self.support_vectors.shape[1])

    def decision_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[1]}")
        if self.support_vectors.shape[0] == 0:
            return np.full(x.shape[0], self.bias)
        return rbf_kernel(x, self.support_vectors, self.config.gamma) @ self.dual_coefs + self.bias

    def to_dict(self) -> dict[str, Any]:
        return {
            "support_vectors": self.support_vectors.tolist(),
            "dual_coefs": self.dual_coefs.tolist(),
            "bias": self.bias,
            "config": asdict(self.config),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> SvmModel:
        vectors = np.asarray(payload["support_vectors"], dtype=np.float64)
        coefs = np.asarray(payload["dual_coefs"], dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != coefs.shape[0]:
            raise ValueError("model support vectors and coefficients disagree in shape")
        return cls(
            support_vectors=vectors,
            dual_coefs=coefs,
            bias=float(payload["bias"]),
            config=SvmConfig(**payload["config"]),
        )


def decision(model: SvmModel, x: Sequence[float] | np.ndarray) -> float:
    return float(model.decision_batch(np.asarray(x, dtype=np.float64)[None, :])[0])


def predict(model: SvmModel, x: Sequence[float] | np.ndarray) -> Label:
    """Infected is the positive class; a zero decision counts as infected."""
    return Label.INFECTED if decision(model, x) >= 0.0 else Label.HEALTHY


def predict_batch(model: SvmModel, x: np.ndarray) -> np.ndarray:
    """Boolean array, True where infected."""
    return model.decision_batch(x) >= 0.0


@dataclass
class SmoSolution:
    alpha: np.ndarray
    bias: float
    iterations: int
    converged: bool


def _check_training_set(x: np.ndarray, y: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"feature matrix {x.shape} does not match {y.shape[0]} labels")
    if x.shape[0] == 0:
        raise ValueError("training set is empty")
    if not np.all(np.isfinite(x)):
        raise ValueError("training features contain non-finite values")
    if np.all(y > 0) or np.all(y < 0):
        raise ValueError("training set needs samples of both classes")


def solve_smo(kernel: np.ndarray, y: np.ndarray, config: SvmConfig) -> SmoSolution:
    """Minimize 0.5 a'Qa - e'a s.t. 0 <= a <= C, y'a = 0 with Q = yy'K.

    Working pair: maximal violator i, then the j giving the largest second-order
    decrease of the objective. Stops when the violation gap drops below tol.
    """
    n = y.shape[0]
    c = config.c
    q = (y[:, None] * y[None, :]) * kernel
    q_diag = np.diag(q).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)
    positive = y > 0
    max_iters = config.max_iters if config.max_iters is not None else 100 * n

    iterations = 0
    stalled = 0
    converged = False
    while iterations < max_iters:
        below_c = alpha < c
        above_0 = alpha > 0
        in_up = (below_c & positive) | (above_0 & ~positive)
        in_low = (below_c & ~positive) | (above_0 & positive)
        score = -y * grad

        up_scores = np.where(in_up, score, -np.inf)
        i = int(np.argmax(up_scores))
        g_max = up_scores[i]
        low_scores = np.where(in_low, score, np.inf)
        g_min = float(np.min(low_scores))
        if g_max - g_min < config.tol:
            converged = True
            break

        b = g_max - score
        a = q_diag[i] + q_diag - 2.0 * y[i] * y * q[i]
        a = np.where(a > 0, a, TAU)
        candidates = in_low & (b > 0)
        gains = np.where(candidates, -(b * b) / a, np.inf)
        j = int(np.argmin(gains))

        old_i, old_j = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = q_diag[i] + q_diag[j] + 2.0 * q[i, j]
            quad = quad if quad > 0 else TAU
            delta = (-grad[i] - grad[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            elif alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = -diff
            if diff > 0:
                if alpha[i] > c:
                    alpha[i] = c
                    alpha[j] = c - diff
            elif alpha[j] > c:
                alpha[j] = c
                alpha[i] = c + diff
        else:
            quad = q_diag[i] + q_diag[j] - 2.0 * q[i, j]
            quad = quad if quad > 0 else TAU
            delta = (grad[i] - grad[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > c:
                if alpha[i] > c:
                    alpha[i] = c
                    alpha[j] = total - c
            elif alpha[j] < 0:
                alpha[j] = 0.0
                alpha[i] = total
            if total > c:
                if alpha[j] > c:
                    alpha[j] = c
                    alpha[i] = total - c
            elif alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = total

        delta_i = alpha[i] - old_i
        delta_j = alpha[j] - old_j
        iterations += 1
        grad += q[:, i] * delta_i + q[:, j] * delta_j
        if abs(delta_i) < TAU and abs(delta_j) < TAU:
            stalled += 1
            if stalled >= config.max_passes:
                break
        else:
            stalled = 0

    if not converged:
        log(f"SMO stopped without convergence after {iterations} iterations")
    return SmoSolution(alpha=alpha, bias=_bias(alpha, grad, y, c), iterations=iterations, converged=converged)


def _bias(alpha: np.ndarray, grad: np.ndarray, y: np.ndarray, c: float) -> float:
    y_grad = y * grad
    at_upper = alpha >= c
    at_lower = alpha <= 0
    free = ~at_upper & ~at_lower
    if free.any():
        rho = float(np.mean(y_grad[free]))
    else:
        positive = y > 0
        ub_mask = (at_upper & ~positive) | (at_lower & positive)
        lb_mask = (at_upper & positive) | (at_lower & ~positive)
        ub = float(np.min(y_grad[ub_mask])) if ub_mask.any() else np.inf
        lb = float(np.max(y_grad[lb_mask])) if lb_mask.any() else -np.inf
        rho = (ub + lb) / 2.0
    return -rho


def fit_kernel(kernel: np.ndarray, y: np.ndarray, config: SvmConfig) -> tuple[np.ndarray, float]:
    """Solve on a precomputed kernel; returns signed coefficients alpha*y for every sample and the bias."""
    solution = solve_smo(kernel, y, config)
    return solution.alpha * y, solution.bias


def train_arrays(x: np.ndarray, infected: np.ndarray, config: SvmConfig) -> SvmModel:
    """Train on a feature matrix and a boolean infected mask."""
    x = np.asarray(x, dtype=np.float64)
    y = np.where(np.asarray(infected, dtype=bool), 1.0, -1.0)
    _check_training_set(x, y)
    solution = solve_smo(rbf_kernel(x, x, config.gamma), y, config)
    keep = solution.alpha > PRUNE_ALPHA
    return SvmModel(
        support_vectors=x[keep].copy(),
        dual_coefs=(solution.alpha * y)[keep],
        bias=solution.bias,
        config=config,
    )


def train(features: Sequence[FeatureVector], config: SvmConfig = SvmConfig(), seed: int | None = None) -> SvmModel:
    """Train on labeled feature vectors; seed is ignored."""
    if not features:
        raise ValueError("training set is empty")
    widths = {len(vector.values) for vector in features}
    if len(widths) != 1:
        raise ValueError(f"inconsistent feature dimensionality: {sorted(widths)}")
    if any(vector.label is None for vector in features):
        raise ValueError("training features must be labeled")
    x = np.array([vector.values for vector in features], dtype=np.float64)
    infected = np.array([vector.label is Label.INFECTED for vector in features])
    return train_arrays(x, infected, config)


def dual_objective(alpha: np.ndarray, y: np.ndarray, kernel: np.ndarray) -> float:
    """Dual objective sum(a) - 0.5 a'Qa (maximized)."""
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ kernel @ ay)
