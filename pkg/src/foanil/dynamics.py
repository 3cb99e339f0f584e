"""FO-ANIL / FO-MAML training dynamics on the linear two-layer model.

Four regimes are provided:

* ``finite_anil``  - first-order ANIL on a finite batch of tasks,
* ``finite_maml``  - first-order MAML on the same batch,
* ``inf_tasks``    - exact expected FO-ANIL update over the task distribution,
* ``inf_samples``  - FO-ANIL with infinitely many samples per task.

The learner predicts ``x -> x^T B w`` with ``B`` of shape ``(d, k')``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from ._kernels import residual_grads
from .task_model import GroundTruth, RngSpec, TaskBatch, _stream, random_orthonormal, sample_tasks

__all__ = [
    "MetaParams",
    "InitSpec",
    "Schedule",
    "TraceRecord",
    "TraceCSV",
    "UnsupportedConfiguration",
    "init_params",
    "anil_inner_head",
    "foanil_gradients",
    "foanil_step",
    "fomaml_gradients",
    "fomaml_step",
    "expected_head_cov",
    "infinite_tasks_step",
    "infinite_samples_step",
    "trace_record",
    "train",
    "MODES",
]

MODES = ("finite_anil", "finite_maml", "inf_tasks", "inf_samples")


class UnsupportedConfiguration(ValueError):
    pass


@dataclass
class MetaParams:
    b: np.ndarray
    w: np.ndarray
    alpha: float
    beta: float

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if self.b.ndim != 2 or self.w.shape != (self.b.shape[1],):
            raise ValueError(f"inconsistent shapes b{self.b.shape} w{self.w.shape}")
        if not (self.alpha >= 0 and self.beta >= 0):
            raise ValueError("step sizes must be non-negative")

    @property
    def d(self) -> int:
        return self.b.shape[0]

    @property
    def k_prime(self) -> int:
        return self.b.shape[1]

    def copy(self) -> "MetaParams":
        return replace(self, b=self.b.copy(), w=self.w.copy())

    def with_values(self, b, w) -> "MetaParams":
        return MetaParams(b, w, self.alpha, self.beta)


@dataclass(frozen=True)
class InitSpec:
    """``B_0^T B_0 = b_scale * I`` and ``||w_0||^2 = w_scale``."""

    b_scale: float
    w_scale: float

    def __post_init__(self):
        if not self.b_scale > 0 or self.w_scale < 0:
            raise ValueError("need b_scale > 0 and w_scale >= 0")

    @classmethod
    def default(cls, alpha: float, k_prime: int) -> "InitSpec":
        return cls(b_scale=1.0 / (4.0 * alpha), w_scale=0.01 * k_prime * alpha)


def init_params(gt: GroundTruth, k_prime: int, init: InitSpec, rng=0, *,
                alpha: float = 0.025, beta: float = 0.025, max_tries: int = 10) -> MetaParams:
    if not gt.k <= k_prime <= gt.d:
        raise ValueError(f"need k <= k' <= d, got k={gt.k}, k'={k_prime}, d={gt.d}")
    gen = _stream(rng, "init")
    for _ in range(max_tries):
        b0 = np.sqrt(init.b_scale) * random_orthonormal(gen, gt.d, k_prime)
        if np.linalg.matrix_rank(gt.b_star.T @ b0) == gt.k:
            break
    else:  # pragma: no cover - probability zero
        raise RuntimeError("could not draw B_0 with full-rank B_star^T B_0")
    u = gen.standard_normal(k_prime)
    w0 = np.sqrt(init.w_scale) * u / np.linalg.norm(u)
    return MetaParams(b0, w0, alpha, beta)


# -- finite-task updates -------------------------------------------------------


def anil_inner_head(params: MetaParams, x_in: np.ndarray, y_in: np.ndarray) -> np.ndarray:
    """One gradient step on the head: ``w - (alpha/m) B^T X^T (X B w - y)``.

    Accepts one task (``x_in`` of shape ``(m, d)``) or a stack ``(n, m, d)``.
    """
    single = x_in.ndim == 2
    x = x_in[None] if single else x_in
    y = y_in[None] if single else y_in
    g = residual_grads(x, y, params.b @ params.w)
    heads = params.w - params.alpha * (g @ params.b)
    return heads[0] if single else heads


def _first_order_grads(params: MetaParams, batch: TaskBatch, body_alpha: float):
    b, w, alpha = params.b, params.w, params.alpha
    g_in = residual_grads(batch.x_in, batch.y_in, b @ w)
    heads = w - alpha * (g_in @ b)
    preds = heads @ b.T
    if body_alpha != 0.0:
        # B_i w_i with B_i = B - body_alpha * g_in w^T
        preds = preds - body_alpha * (heads @ w)[:, None] * g_in
    g_out = residual_grads(batch.x_out, batch.y_out, preds)
    n = batch.n_tasks
    grad_b = (g_out.T @ heads) / n
    grad_w = b.T @ g_out.mean(axis=0)
    if body_alpha != 0.0:
        grad_w = grad_w - body_alpha * w * np.mean(np.einsum("nd,nd->n", g_in, g_out))
    return grad_b, grad_w, heads


def foanil_gradients(params: MetaParams, batch: TaskBatch):
    """First-order ANIL outer gradients ``(grad_B, grad_w, adapted_heads)``.

    The outer squared loss is differentiated at ``(B, w_i)`` with the adapted
    heads ``w_i`` held fixed.
    """
    return _first_order_grads(params, batch, 0.0)


def foanil_step(params: MetaParams, batch: TaskBatch) -> MetaParams:
    grad_b, grad_w, _ = foanil_gradients(params, batch)
    return params.with_values(params.b - params.beta * grad_b, params.w - params.beta * grad_w)


def fomaml_gradients(params: MetaParams, batch: TaskBatch, body_alpha: float | None = None):
    """First-order MAML: the inner step adapts both ``B`` and ``w``.

    ``body_alpha`` is the inner step on ``B`` (defaults to ``alpha``); setting
    it to zero recovers FO-ANIL exactly.
    """
    return _first_order_grads(params, batch, params.alpha if body_alpha is None else float(body_alpha))


def fomaml_step(params: MetaParams, batch: TaskBatch, body_alpha: float | None = None) -> MetaParams:
    grad_b, grad_w, _ = fomaml_gradients(params, batch, body_alpha)
    return params.with_values(params.b - params.beta * grad_b, params.w - params.beta * grad_w)


# -- idealised regimes ---------------------------------------------------------


def expected_head_cov(params: MetaParams, gt: GroundTruth, m_in: float) -> np.ndarray:
    """Exact ``E[w_i w_i^T]`` of the adapted head over tasks, features and noise.

    ``m_in = inf`` drops the finite-sample terms.
    """
    b, w, alpha = params.b, params.w, params.alpha
    delta = np.eye(params.k_prime) - alpha * (b.T @ b)
    dw = delta @ w
    proj = b.T @ gt.b_star  # (k', k)
    signal = proj @ gt.sigma_star @ proj.T
    cov = np.outer(dw, dw) + alpha**2 * signal
    if np.isfinite(m_in):
        bw = b @ w
        btbw = b.T @ bw
        scalar = bw @ bw + np.trace(gt.sigma_star) + gt.noise_var
        cov = cov + (alpha**2 / m_in) * (np.outer(btbw, btbw) + signal + scalar * (b.T @ b))
    return cov


def infinite_tasks_step(params: MetaParams, gt: GroundTruth, m_in: float):
    """Expected FO-ANIL update over infinitely many centred tasks.

    Returns the new parameters and the head covariance used in the update.
    """
    if not gt.is_centered:
        raise UnsupportedConfiguration("infinite-tasks update is only derived for mu_star = 0")
    b, w, alpha, beta = params.b, params.w, params.alpha, params.beta
    btb = b.T @ b
    delta = np.eye(params.k_prime) - alpha * btb
    e_wwt = expected_head_cov(params, gt, m_in)
    w_next = w - beta * (delta @ (btb @ w))
    m_star_b = gt.b_star @ (gt.sigma_star @ (gt.b_star.T @ b))
    b_next = b - beta * (b @ e_wwt) + alpha * beta * m_star_b
    return params.with_values(b_next, w_next), e_wwt


def infinite_samples_step(params: MetaParams, gt: GroundTruth, task_mean=None,
                          task_second_moment=None) -> MetaParams:
    """FO-ANIL update with infinitely many samples per task.

    ``task_mean`` / ``task_second_moment`` (the uncentred ``E[w* w*^T]``)
    default to the population values of ``gt``; pass empirical moments of a
    finite task set to reproduce the finite-``N`` variant.
    """
    b, w, alpha, beta = params.b, params.w, params.alpha, params.beta
    mu = gt.mu_star if task_mean is None else np.asarray(task_mean, dtype=float)
    second = gt.task_second_moment if task_second_moment is None else np.asarray(task_second_moment)
    delta = np.eye(params.k_prime) - alpha * (b.T @ b)
    dw = delta @ w
    c_mu = gt.b_star @ mu
    w_next = w - beta * (delta @ (b.T @ (b @ w - c_mu)))
    left = b @ dw
    b_next = b - beta * np.outer(left, dw + alpha * (b.T @ c_mu))
    inner = np.outer(mu, dw) + alpha * (second @ (gt.b_star.T @ b))
    proj = gt.b_star @ inner
    b_next = b_next + beta * (proj - alpha * (b @ (b.T @ proj)))
    return params.with_values(b_next, w_next)


# -- diagnostics ----------------------------------------------------------------


@dataclass
class TraceRecord:
    step: int
    sv2_min_C: float
    sv2_max_C: float
    sv2_mean_D: float
    sv2_max_D: float
    btw_residual: float
    lambda_residual: float
    rate_bound: float
    wall_ms: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        return [getattr(self, c) for c in self.columns()]


def _sv2(mat: np.ndarray) -> np.ndarray:
    gram = mat @ mat.T if mat.shape[0] <= mat.shape[1] else mat.T @ mat
    return np.clip(np.linalg.eigvalsh(gram), 0.0, None)


def trace_record(step: int, b: np.ndarray, w: np.ndarray | None, gt: GroundTruth, *,
                 lambda_star: np.ndarray | None = None, rate: float = float("nan"),
                 wall_ms: float = 0.0) -> TraceRecord:
    c = gt.b_star.T @ b
    dmat = gt.b_perp.T @ b
    sv_c, sv_d = _sv2(c), _sv2(dmat)
    n_d = min(dmat.shape)
    btw = float("nan") if w is None else float(np.sum((b @ w - gt.b_star @ gt.mu_star) ** 2))
    if lambda_star is None:
        lam_res = float("nan")
    else:
        lam_res = float(np.linalg.norm(c @ c.T - lambda_star) / np.linalg.norm(lambda_star))
    return TraceRecord(step, float(sv_c.min()), float(sv_c.max()),
                       float(np.sum(dmat * dmat) / n_d), float(sv_d.max()),
                       btw, lam_res, float(rate), float(wall_ms))


class TraceCSV:
    """Append :class:`TraceRecord` rows to a CSV file."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = self.path.open("w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(TraceRecord.columns())

    def __call__(self, record: TraceRecord) -> None:
        self._writer.writerow([repr(v) if isinstance(v, float) else v for v in record.row()])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- training loop ----------------------------------------------------------------


@dataclass
class Schedule:
    n_steps: int = 5000
    cadence: int = 50
    n_tasks: int = 5000
    m_in: int = 20
    m_out: int = 10
    resample: bool = False

    def __post_init__(self):
        if self.n_steps < 0 or self.cadence < 1:
            raise ValueError("need n_steps >= 0 and cadence >= 1")


def _task_moments(batch: TaskBatch):
    ws = batch.w_star
    return ws.mean(axis=0), (ws.T @ ws) / ws.shape[0]


def train(params: MetaParams, gt: GroundTruth, schedule: Schedule, mode: str = "finite_anil",
          rng=0, trace_sink: Callable[[TraceRecord], None] | None = None, *,
          batch: TaskBatch | None = None, on_step: Callable[[int, MetaParams], None] | None = None,
          ) -> MetaParams:
    """Run ``schedule.n_steps`` outer iterations of ``mode``.

    Finite regimes reuse a single batch of ``schedule.n_tasks`` tasks unless
    ``schedule.resample`` is set; ``inf_samples`` uses the empirical task
    moments of that batch.  A trace record is emitted at step 0, every
    ``cadence`` steps and at the final step.  ``on_step(t, params)`` sees
    every iterate, including the initial one.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    rng = RngSpec(int(rng)) if isinstance(rng, (int, np.integer)) else rng
    m_in = schedule.m_in
    needs_batch = mode != "inf_tasks"
    if needs_batch and batch is None:
        batch = sample_tasks(gt, schedule.n_tasks, m_in, schedule.m_out, rng)
    if mode == "inf_tasks" and not gt.is_centered:
        raise UnsupportedConfiguration("inf_tasks requires mu_star = 0")
    if batch is not None:
        m_in = batch.m_in
    moments = _task_moments(batch) if mode == "inf_samples" else None

    from .theory import lambda_star as _lambda_star, rate_bound as _rate_bound

    lam = _lambda_star(gt, params.alpha, m_in).lambda_star if params.alpha > 0 else None
    d0 = float(_sv2(gt.b_perp.T @ params.b).max())
    start = time.perf_counter()

    def emit(t, p):
        if trace_sink is None:
            return
        rate = _rate_bound(t, p.alpha, p.beta, m_in, gt.sigma_bar2, d0) if p.alpha > 0 else float("nan")
        trace_sink(trace_record(t, p.b, p.w, gt, lambda_star=lam, rate=rate,
                                wall_ms=1e3 * (time.perf_counter() - start)))

    p = params.copy()
    if on_step is not None:
        on_step(0, p)
    emit(0, p)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, schedule.n_steps + 1):
            if needs_batch and schedule.resample and mode != "inf_samples":
                batch = sample_tasks(gt, schedule.n_tasks, m_in, schedule.m_out, rng.child(t))
            if mode == "finite_anil":
                p = foanil_step(p, batch)
            elif mode == "finite_maml":
                p = fomaml_step(p, batch)
            elif mode == "inf_tasks":
                p, _ = infinite_tasks_step(p, gt, m_in)
            else:
                p = infinite_samples_step(p, gt, *moments)
            if not (np.all(np.isfinite(p.b)) and np.all(np.isfinite(p.w))):
                raise FloatingPointError(f"{mode} diverged at step {t}")
            if on_step is not None:
                on_step(t, p)
            if t % schedule.cadence == 0 or t == schedule.n_steps:
                emit(t, p)
    return p


def collect(records: Iterable[TraceRecord]) -> dict[str, np.ndarray]:
    """Column-wise arrays from a list of trace records."""
    records = list(records)
    return {c: np.array([getattr(r, c) for r in records]) for c in TraceRecord.columns()}
