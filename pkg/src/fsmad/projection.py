"""Exact t-SNE for 2-D views of embeddings, plus CSV export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import InfeasibleError, ValidationError, format_float, make_rng

ENTROPY_TOL = 1e-5
MAX_BISECTION_STEPS = 50


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    initial_momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    seed: int = 0

    def __post_init__(self):
        if not self.perplexity > 0:
            raise ValidationError("perplexity must be > 0")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")

    def check_feasible(self, n_points: int) -> None:
        if n_points < 5:
            raise InfeasibleError(f"t-SNE needs at least 5 points, got {n_points}")
        if not self.perplexity < (n_points - 1) / 3:
            raise InfeasibleError(
                f"perplexity {self.perplexity} is infeasible for {n_points} points (must be < {(n_points - 1) / 3:.4g})"
            )


def squared_distances(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def _row_entropy(d: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    # d is shifted so its minimum is 0; the shift cancels in the normalisation
    p = np.exp(-d * beta)
    s = p.sum()
    p /= s
    return float(np.log(s) + beta * np.dot(d, p)), p


def conditional_affinities(D: np.ndarray, perplexity: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic Gaussian affinities matching ``perplexity``.

    Each row's precision is found by bisection on the Shannon entropy (in
    nats) until it is within ``ENTROPY_TOL`` of ``log(perplexity)`` or
    ``MAX_BISECTION_STEPS`` steps have run.

    Returns:
        ``(P, betas)``: the conditional matrix with zero diagonal and the
        per-row precisions ``1 / (2 sigma_i^2)``.
    """
    n = D.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        d = np.delete(D[i], i)
        d = d - d.min()
        beta, lo, hi = 1.0, 0.0, np.inf
        h, p = _row_entropy(d, beta)
        for _ in range(MAX_BISECTION_STEPS):
            if abs(h - target) < ENTROPY_TOL:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
            h, p = _row_entropy(d, beta)
        betas[i] = beta
        P[i, np.arange(n) != i] = p
    return P, betas


def joint_affinities(P_cond: np.ndarray) -> np.ndarray:
    n = P_cond.shape[0]
    return (P_cond + P_cond.T) / (2.0 * n)


def kl_divergence(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], np.finfo(float).tiny))))


def _student_t(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    return num, num / num.sum()


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl_history: list[float]
    betas: np.ndarray


def run_tsne(X, cfg: TsneConfig = TsneConfig()) -> TsneResult:
    """Exact O(n^2) t-SNE with momentum, per-parameter gains and early exaggeration.

    ``kl_history[t]`` is the KL divergence (against the un-exaggerated
    affinities) of the layout entering iteration ``t``; the last entry is the
    final layout, so the list has ``iterations + 1`` values.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError("expected an (n, E) matrix")
    n = X.shape[0]
    cfg.check_feasible(n)

    P_cond, betas = conditional_affinities(squared_distances(X), cfg.perplexity)
    P = joint_affinities(P_cond)

    Y = make_rng(cfg.seed).standard_normal((n, 2)) * 1e-4
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history = []
    for it in range(cfg.iterations):
        exag = cfg.exaggeration if it < cfg.exaggeration_iters else 1.0
        num, Q = _student_t(Y)
        history.append(kl_divergence(P, Q))
        W = (exag * P - Q) * num
        grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
        momentum = cfg.initial_momentum if it < cfg.momentum_switch else cfg.final_momentum
        same_sign = (grad > 0) == (update > 0)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - cfg.learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
    history.append(kl_divergence(P, _student_t(Y)[1]))
    return TsneResult(Y, history, betas)


def tsne_project(embeddings, cfg: TsneConfig = TsneConfig()) -> np.ndarray:
    return run_tsne(embeddings, cfg).embedding


def projection_csv(points: np.ndarray, meta: Sequence[tuple[str, str, str]]) -> str:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValidationError("points must be an (n, 2) matrix")
    if len(meta) != points.shape[0]:
        raise ValidationError(f"{points.shape[0]} points but {len(meta)} metadata rows")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", "domain", "x", "y"])
    for (id_, label, domain), (x, y) in zip(meta, points):
        w.writerow([id_, label, domain, format_float(x), format_float(y)])
    return buf.getvalue()


def export_projection(points, meta: Sequence[tuple[str, str, str]], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(projection_csv(points, meta))
    return path


def read_projection(path: str | Path) -> tuple[np.ndarray, list[tuple[str, str, str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    pts = np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2)
    return pts, [(r["id"], r["label"], r["domain"]) for r in rows]
