"""Non-meta baselines: regularised Burer-Monteiro factorisation and ridge regression."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from ._kernels import residual_grads_and_loss
from .dynamics import InitSpec
from .task_model import TaskBatch, _stream, random_orthonormal

__all__ = [
    "BmState",
    "MinimizerConfig",
    "BmDivergence",
    "RankError",
    "bm_objective_grad",
    "bm_fit",
    "bm_init",
    "ridge_regression",
]


class BmDivergence(FloatingPointError):
    pass


class RankError(np.linalg.LinAlgError):
    pass


@dataclass
class BmState:
    b: np.ndarray
    w_cols: np.ndarray
    reg_weight: float = 0.125
    converged: bool = False
    n_iters: int = 0
    log: list[dict] = field(default_factory=list, repr=False)

    @property
    def k_prime(self) -> int:
        return self.b.shape[1]

    def write_log(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["iter", "loss", "grad_norm", "step_len"])
            writer.writeheader()
            writer.writerows(self.log)
        return path


@dataclass(frozen=True)
class MinimizerConfig:
    """``method`` is ``"lbfgs"`` (history ``history``) or ``"gd"`` (backtracking from ``step``).

    The L-BFGS defaults are scipy's own (``maxiter=15000``, ``maxcor=10``,
    ``gtol=1e-5``, ``ftol=2.2e-9``).
    """

    method: str = "lbfgs"
    max_iters: int = 15000
    grad_tol: float = 1e-5
    history: int = 10
    rel_tol: float = 2.220446049250313e-09
    step: float = 1.0
    backtrack: float = 0.5

    def __post_init__(self):
        if self.method not in ("lbfgs", "gd"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.max_iters < 0 or self.grad_tol < 0:
            raise ValueError("max_iters and grad_tol must be non-negative")


def _full_rows(batch: TaskBatch) -> tuple[np.ndarray, np.ndarray]:
    return (np.concatenate([batch.x_in, batch.x_out], axis=1),
            np.concatenate([batch.y_in, batch.y_out], axis=1))


def _objective(b, w_cols, x, y, reg_weight):
    n = x.shape[0]
    preds = w_cols.T @ b.T  # (n, d)
    g, sq = residual_grads_and_loss(x, y, preds)
    gap = b.T @ b - w_cols @ w_cols.T
    loss = 0.5 * math.fsum(sq) / n + reg_weight * float(np.sum(gap * gap))
    grad_b = (g.T @ w_cols.T) / n + 4.0 * reg_weight * (b @ gap)
    grad_w = (b.T @ g.T) / n - 4.0 * reg_weight * (gap @ w_cols)
    return loss, grad_b, grad_w


def bm_objective_grad(state: BmState, batch: TaskBatch):
    """Loss and analytic gradients of the regularised factorisation objective.

    ``(1/2N) sum_i ||y_i - X_i B W_i||^2 / m + reg ||B^T B - W W^T||_F^2`` over
    all ``m = m_in + m_out`` rows of every task.
    """
    x, y = _full_rows(batch)
    return _objective(state.b, state.w_cols, x, y, state.reg_weight)


def bm_init(d: int, n_tasks: int, k_prime: int, init: InitSpec, rng=0) -> tuple[np.ndarray, np.ndarray]:
    gen = _stream(rng, "bm_init")
    b = np.sqrt(init.b_scale) * random_orthonormal(gen, d, k_prime)
    u = gen.standard_normal((k_prime, n_tasks))
    w_cols = np.sqrt(init.w_scale) * u / np.linalg.norm(u, axis=0)
    return b, w_cols


def bm_fit(batch: TaskBatch, k_prime: int, init: InitSpec | None = None,
           cfg: MinimizerConfig = MinimizerConfig(), rng=0, reg_weight: float = 0.125,
           alpha: float = 0.025) -> BmState:
    """Fit ``B`` and all task heads jointly.

    ``init`` defaults to ``B^T B = I/100`` and head columns of squared norm
    ``0.01 k' alpha``.
    """
    if init is None:
        init = InitSpec(b_scale=0.01, w_scale=0.01 * k_prime * alpha)
    x, y = _full_rows(batch)
    d, n = x.shape[2], x.shape[0]
    b0, w0 = bm_init(d, n, k_prime, init, rng)
    nb = b0.size

    def unpack(z):
        return z[:nb].reshape(d, k_prime), z[nb:].reshape(k_prime, n)

    def fun(z):
        b, w = unpack(z)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, gb, gw = _objective(b, w, x, y, reg_weight)
        if not np.isfinite(loss):
            raise BmDivergence("non-finite factorisation loss")
        return loss, np.concatenate([gb.ravel(), gw.ravel()])

    z0 = np.concatenate([b0.ravel(), w0.ravel()])
    log: list[dict] = []
    if cfg.method == "lbfgs":
        z, converged, iters = _run_lbfgs(fun, z0, cfg, log)
    else:
        z, converged, iters = _run_gd(fun, z0, cfg, log)
    b, w = unpack(z)
    return BmState(b, w, reg_weight, converged, iters, log)


def _run_lbfgs(fun, z0, cfg: MinimizerConfig, log):
    cache = {}

    def wrapped(z):
        val, grad = fun(z)
        cache["last"] = (z.copy(), val, grad)
        return val, grad

    prev = [z0.copy()]
    f0, g0 = fun(z0)
    log.append({"iter": 0, "loss": f0, "grad_norm": float(np.linalg.norm(g0)), "step_len": 0.0})

    def callback(intermediate_result):
        z = intermediate_result.x
        zc, val, grad = cache["last"]
        if not np.array_equal(zc, z):
            val, grad = fun(z)
        log.append({"iter": len(log), "loss": float(val), "grad_norm": float(np.linalg.norm(grad)),
                    "step_len": float(np.linalg.norm(z - prev[0]))})
        prev[0] = z.copy()

    res = minimize(wrapped, z0, jac=True, method="L-BFGS-B", callback=callback,
                   options={"maxcor": cfg.history, "maxiter": cfg.max_iters, "gtol": cfg.grad_tol,
                            "ftol": cfg.rel_tol, "maxfun": 15000 + 2 * cfg.max_iters})
    converged = bool(res.status == 0)
    return res.x, converged, int(res.nit)


def _run_gd(fun, z, cfg: MinimizerConfig, log):
    f, g = fun(z)
    log.append({"iter": 0, "loss": f, "grad_norm": float(np.linalg.norm(g)), "step_len": 0.0})
    step = cfg.step
    for it in range(1, cfg.max_iters + 1):
        gn2 = float(g @ g)
        if math.sqrt(gn2) <= cfg.grad_tol:
            return z, True, it - 1
        while True:
            cand = z - step * g
            fc, gc = fun(cand)
            if fc <= f - 1e-4 * step * gn2:
                break
            step *= cfg.backtrack
            if step < 1e-16:
                return z, False, it - 1
        log.append({"iter": it, "loss": fc, "grad_norm": float(np.linalg.norm(gc)),
                    "step_len": step * math.sqrt(gn2)})
        z, f, g = cand, fc, gc
        step = min(step / cfg.backtrack, cfg.step)
    return z, bool(np.linalg.norm(g) <= cfg.grad_tol), cfg.max_iters


def ridge_regression(features: np.ndarray, targets: np.ndarray, lam: float) -> np.ndarray:
    """Minimise ``||y - F w||^2 / (2 m) + lam ||w||^2``.

    Solves ``(F^T F + 2 lam m I) w = F^T y``.  ``features`` may be a single
    ``(m, p)`` design or a stack ``(n, m, p)``.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    f = np.asarray(features, dtype=float)
    yv = np.asarray(targets, dtype=float)
    m, p = f.shape[-2], f.shape[-1]
    ft = np.swapaxes(f, -1, -2)
    gram = ft @ f + (2.0 * lam * m) * np.eye(p)
    rhs = (ft @ yv[..., None])[..., 0]
    if lam == 0:
        ranks = np.linalg.matrix_rank(f)
        if np.any(ranks < p):
            raise RankError("unregularised ridge needs full column rank features")
    return np.linalg.solve(gram, rhs[..., None])[..., 0]
