"""Closed-form targets and checkers for FO-ANIL on the linear model.

Everything here is a pure function of the ground truth and hyperparameters,
except the Monte Carlo verifiers, which take an explicit random stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import residual_grads
from .dynamics import InitSpec, MetaParams, UnsupportedConfiguration, infinite_tasks_step
from .task_model import GroundTruth, RngSpec, _stream, sample_test_tasks

__all__ = [
    "FixedPoint",
    "ConditionReport",
    "ChainReport",
    "TrajectoryMonitor",
    "lambda_star",
    "lambda_star_shifted",
    "fixed_point_params",
    "fixed_point_residual",
    "check_convergence_conditions",
    "rate_bound",
    "wwtop_expectation",
    "mc_wwtop",
    "closed_form_anil_loss",
    "mc_anil_loss",
    "loss_ordering_chain",
]


@dataclass(frozen=True)
class FixedPoint:
    lambda_star: np.ndarray
    alpha: float
    m_in: float
    sigma_bar2: float
    tau: float = 0.0
    gamma: float = 0.0

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.lambda_star)

    @property
    def ceiling(self) -> float:
        """Upper bound ``m / (alpha (m + 1))`` on every eigenvalue."""
        return self.m_in / (self.alpha * (self.m_in + 1))


def _shrinkage(gt: GroundTruth, alpha: float, m_in: float, tau: float, gamma: float) -> np.ndarray:
    if alpha <= 0 or m_in < 1:
        raise ValueError("need alpha > 0 and m_in >= 1")
    k = gt.k
    floor = (gt.sigma_bar2 + tau) / (m_in + 1)
    inner = np.linalg.solve(gt.sigma_star + floor * np.eye(k), np.eye(k))
    lam = (m_in / (alpha * (m_in + 1))) * (np.eye(k) - (floor + gamma) * inner)
    return 0.5 * (lam + lam.T)


def lambda_star(gt: GroundTruth, alpha: float, m_in: float) -> FixedPoint:
    """Limit of ``B*^T B_t B_t^T B*`` under FO-ANIL with ``m_in`` inner samples."""
    return FixedPoint(_shrinkage(gt, alpha, m_in, 0.0, 0.0), alpha, m_in, gt.sigma_bar2)


def lambda_star_shifted(gt: GroundTruth, alpha: float, m_in: float, tau: float, gamma: float) -> FixedPoint:
    """Fixed point with the noise level raised by ``tau`` and the signal lowered by ``gamma``."""
    lam_min = float(np.linalg.eigvalsh(gt.sigma_star)[0])
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if not 0 <= gamma < lam_min:
        raise ValueError(f"need 0 <= gamma < lambda_min(Sigma*) = {lam_min:g}, got {gamma:g}")
    return FixedPoint(_shrinkage(gt, alpha, m_in, tau, gamma), alpha, m_in, gt.sigma_bar2, tau, gamma)


def fixed_point_params(gt: GroundTruth, alpha: float, beta: float, m_in: float,
                       k_prime: int | None = None, lam: np.ndarray | None = None) -> MetaParams:
    """A point with no complement energy, zero head and ``Lambda = Lambda*``.

    ``lam`` overrides the in-subspace Gram matrix (used to build perturbed
    points for negative checks).
    """
    k_prime = gt.k if k_prime is None else k_prime
    lam = lambda_star(gt, alpha, m_in).lambda_star if lam is None else np.asarray(lam)
    vals, vecs = np.linalg.eigh(lam)
    root = vecs @ np.diag(np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    b = np.zeros((gt.d, k_prime))
    b[:, : gt.k] = gt.b_star @ root
    return MetaParams(b, np.zeros(k_prime), alpha, beta)


def fixed_point_residual(gt: GroundTruth, alpha: float, beta: float, m_in: float,
                         lam: np.ndarray | None = None) -> float:
    """Relative change of ``Lambda`` after one infinite-tasks step from the fixed point."""
    p0 = fixed_point_params(gt, alpha, beta, m_in, lam=lam)
    p1, _ = infinite_tasks_step(p0, gt, m_in)
    target = lambda_star(gt, alpha, m_in).lambda_star
    c1 = gt.b_star.T @ p1.b
    return float(np.linalg.norm(c1 @ c1.T - target) / np.linalg.norm(target))


# -- step-size and initialisation conditions -------------------------------------


@dataclass(frozen=True)
class Condition:
    name: str
    lhs: float
    rhs: float
    strict: bool = False

    @property
    def ok(self) -> bool:
        return self.lhs < self.rhs if self.strict else self.lhs <= self.rhs

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs


@dataclass
class ConditionReport:
    """Each inequality stored as ``lhs <= rhs`` (or ``<`` when strict)."""

    conditions: list[Condition] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.conditions)

    def __getitem__(self, name: str) -> Condition:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self) -> list[str]:
        return [c.name for c in self.conditions if not c.ok]

    def rows(self) -> list[tuple[str, bool, float, float, float]]:
        return [(c.name, c.ok, c.lhs, c.rhs, c.margin) for c in self.conditions]


def check_convergence_conditions(gt: GroundTruth, alpha: float, beta: float, init, c1: float,
                                 c2: float, m_in: int = 20) -> ConditionReport:
    """Evaluate the convergence conditions for isotropic task covariance.

    ``init`` is either an :class:`InitSpec` (the rank condition then holds with
    probability one) or concrete :class:`MetaParams`.
    """
    if not gt.is_isotropic:
        raise UnsupportedConfiguration("conditions are only stated for isotropic Sigma*")
    m = float(m_in)
    sb2 = gt.sigma_bar2
    eigs = np.linalg.eigvalsh(gt.sigma_star)
    lam_min, op = float(eigs[0]), float(eigs[-1])
    inv_ab = 1.0 / (alpha * beta)

    if isinstance(init, InitSpec):
        rank_ok, b_norm2, w_norm2 = True, init.b_scale, init.w_scale
    else:
        rank_ok = np.linalg.matrix_rank(gt.b_star.T @ init.b) == gt.k
        b_norm2 = float(np.linalg.norm(init.b, 2) ** 2)
        w_norm2 = float(init.w @ init.w)

    conds = [
        Condition("c1_in_unit_interval", 0.0, c1, strict=True),
        Condition("c1_below_one", c1, 1.0, strict=True),
        Condition("c2_positive", 0.0, c2, strict=True),
        Condition("feasibility", c2 * (m + 1) / m + c1 * (c2 + sb2) / (2 * m * (m + 1)), lam_min, strict=True),
        Condition("step_1", beta, alpha),
        Condition("step_2", 4 * op, 1.0 / alpha**2),
        Condition("step_3", c2 * (m + 2) / m + c1 * c2 / (2 * m * (m + 1)) + 2 * sb2 / m
                  + (m + 1) / m * op + (4.0 / 3.0) * m / (m + 1) ** 2, inv_ab),
        Condition("step_4", 6 * (op + (c2 + sb2) / (m + 1)), inv_ab),
        Condition("init_1", 0.0 if rank_ok else 1.0, 0.0),
        Condition("init_2", b_norm2, c1 / (alpha * (m + 1))),
        Condition("init_3", w_norm2, alpha * c2),
    ]
    return ConditionReport(conds)


def rate_bound(t, alpha: float, beta: float, m_in: float, sigma_bar2: float, d0_norm2: float):
    """Upper bound on ``||D_t||_2^2``: ``1 / (kappa t + 1/||D_0||^2)``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    if d0_norm2 <= 0:
        return np.zeros_like(t)[()] if t.ndim else 0.0
    kappa = alpha**2 * beta * sigma_bar2 / m_in
    out = 1.0 / (kappa * t + 1.0 / d0_norm2)
    return out[()] if out.ndim == 0 else out


# -- head covariance -----------------------------------------------------------


def _check_unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or abs(np.linalg.norm(v) - 1.0) > 1e-10:
        raise ValueError("v must be a unit vector")
    return v


def wwtop_expectation(n: int, v: np.ndarray) -> np.ndarray:
    """``E[S v v^T S]`` for ``S`` the empirical covariance of ``n`` standard Gaussians."""
    v = _check_unit(v)
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.eye(v.size) / n + (n + 1) / n * np.outer(v, v)


def mc_wwtop(n: int, v: np.ndarray, d: int, trials: int, rng=0, chunk: int = 20000):
    """Monte Carlo mean of ``S v v^T S`` and its per-entry standard error."""
    v = _check_unit(v)
    if v.size != d:
        raise ValueError(f"v has length {v.size}, expected {d}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    gen = _stream(rng, "wwtop")
    total = np.zeros((d, d))
    total_sq = np.zeros((d, d))
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        x = gen.standard_normal((size, n, d))
        u = np.einsum("tnd,tn->td", x, x @ v) / n
        outer = u[:, :, None] * u[:, None, :]
        total += outer.sum(axis=0)
        total_sq += (outer * outer).sum(axis=0)
        done += size
    mean = total / trials
    var = np.maximum(total_sq / trials - mean**2, 0.0)
    return mean, np.sqrt(var / trials)


# -- population ANIL loss ----------------------------------------------------------


def closed_form_anil_loss(lam: np.ndarray, gt: GroundTruth, alpha: float, m_in: float) -> float:
    """ANIL loss at a point with no complement energy and ``B w = 0``.

    Depends on ``B`` only through ``lam = B*^T B B^T B*``; valid for isotropic
    ``Sigma*``.
    """
    if not gt.is_isotropic:
        raise UnsupportedConfiguration("closed form requires isotropic Sigma*")
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    c = float(gt.sigma_star[0, 0])
    m = float(m_in)
    return float(alpha**2 / (2 * m) * ((m + 1) * c + gt.sigma_bar2) * np.trace(lam @ lam)
                 - alpha * c * np.trace(lam) + 0.5 * np.trace(gt.sigma_star))


def _anil_losses(b, w, alpha, gt, x, y, w_star):
    g = residual_grads(x, y, b @ w)
    heads = w - alpha * (g @ b)
    err = heads @ b.T - w_star @ gt.b_star.T
    return 0.5 * np.einsum("nd,nd->n", err, err)


def _mc_losses(points, gt, alpha, m_in, trials, rng, chunk):
    if trials < 2:
        raise ValueError("trials must be >= 2")
    out = [np.empty(trials) for _ in points]
    done = 0
    part = 0
    while done < trials:
        size = min(chunk, trials - done)
        sub = rng.child(part) if hasattr(rng, "child") else rng
        x, y, w_star = sample_test_tasks(gt, size, int(m_in), sub)
        for store, (b, w) in zip(out, points):
            store[done:done + size] = _anil_losses(b, w, alpha, gt, x, y, w_star)
        done += size
        part += 1
    return out


def _as_rng(rng):
    return RngSpec(int(rng)) if isinstance(rng, (int, np.integer)) else rng


def mc_anil_loss(b, w, gt: GroundTruth, m_in: int, trials: int, rng=0, *, alpha: float,
                 chunk: int = 5000) -> tuple[float, float]:
    """Monte Carlo ANIL loss ``0.5 E||B w~ - B* w*||^2``; returns ``(mean, stderr)``."""
    (losses,) = _mc_losses([(np.asarray(b), np.asarray(w))], gt, alpha, m_in, trials, _as_rng(rng), chunk)
    return float(losses.mean()), float(losses.std(ddof=1) / np.sqrt(trials))


@dataclass
class ChainReport:
    names: list[str]
    losses: list[float]
    stderr: list[float]
    gaps: list[float]
    gap_stderr: list[float]
    ci_mult: float = 3.0

    @property
    def passed(self) -> bool:
        return all(g >= -self.ci_mult * s for g, s in zip(self.gaps, self.gap_stderr))


def loss_ordering_chain(b, w, gt: GroundTruth, alpha: float, m_in: int, trials: int, rng=0,
                        chunk: int = 5000, ci_mult: float = 3.0) -> ChainReport:
    """Compare the ANIL loss along the sequence arbitrary -> complement removed
    -> head removed -> fixed point.

    All four points share the same sampled tasks, so each consecutive gap is
    estimated with a paired standard error.
    """
    if not gt.is_centered:
        raise UnsupportedConfiguration("the ordering argument assumes centred tasks")
    b = np.asarray(b, dtype=float)
    w = np.asarray(w, dtype=float)
    b1 = b - gt.b_perp @ (gt.b_perp.T @ b)
    w2 = w - np.linalg.pinv(b1) @ (b1 @ w)
    star = fixed_point_params(gt, alpha, alpha, m_in, k_prime=b.shape[1])
    points = [(b, w), (b1, w), (b1, w2), (star.b, star.w)]
    losses = _mc_losses(points, gt, alpha, m_in, trials, _as_rng(rng), chunk)
    root = np.sqrt(trials)
    gaps = [losses[i] - losses[i + 1] for i in range(3)]
    return ChainReport(
        names=["arbitrary", "complement_removed", "head_removed", "fixed_point"],
        losses=[float(v.mean()) for v in losses],
        stderr=[float(v.std(ddof=1) / root) for v in losses],
        gaps=[float(g.mean()) for g in gaps],
        gap_stderr=[float(g.std(ddof=1) / root) for g in gaps],
        ci_mult=ci_mult,
    )


# -- trajectory properties ---------------------------------------------------------


class TrajectoryMonitor:
    """Per-step checks along an infinite-tasks trajectory.

    Pass the instance as ``on_step`` to :func:`foanil.dynamics.train`.  It
    records head norms, ``||D D^T||_2``, the top eigenvalue of
    ``Lambda_t - Lambda*`` and the unlearning-rate bound, and counts
    violations of the monotonicity and domination properties.
    """

    def __init__(self, gt: GroundTruth, alpha: float, beta: float, m_in: float,
                 psd_tol: float = 1e-8, round_tol: float = 1e-12):
        self.gt = gt
        self.alpha, self.beta, self.m_in = alpha, beta, m_in
        self.lam = lambda_star(gt, alpha, m_in).lambda_star
        self.psd_tol = psd_tol
        self.round_tol = round_tol
        self.steps: list[int] = []
        self.w_norm: list[float] = []
        self.d_norm2: list[float] = []
        self.lambda_excess: list[float] = []
        self.bound: list[float] = []

    def __call__(self, t: int, params: MetaParams) -> None:
        dmat = self.gt.b_perp.T @ params.b
        c = self.gt.b_star.T @ params.b
        d2 = float(np.linalg.norm(dmat, 2) ** 2)
        self.steps.append(t)
        self.w_norm.append(float(np.linalg.norm(params.w)))
        self.d_norm2.append(d2)
        self.lambda_excess.append(float(np.linalg.eigvalsh(c @ c.T - self.lam)[-1]))
        d0 = self.d_norm2[0]
        self.bound.append(float(rate_bound(t, self.alpha, self.beta, self.m_in, self.gt.sigma_bar2, d0)))

    def _increases(self, seq) -> int:
        a = np.asarray(seq)
        return int(np.sum(a[1:] > a[:-1] * (1 + self.round_tol)))

    @property
    def w_violations(self) -> int:
        return self._increases(self.w_norm)

    @property
    def d_violations(self) -> int:
        return self._increases(self.d_norm2)

    @property
    def lambda_violations(self) -> int:
        return int(np.sum(np.asarray(self.lambda_excess) > self.psd_tol))

    @property
    def rate_violations(self) -> int:
        d = np.asarray(self.d_norm2)
        return int(np.sum(d > np.asarray(self.bound) * (1 + self.round_tol)))

    def summary(self) -> dict[str, int]:
        return {
            "steps": len(self.steps),
            "w_norm_increases": self.w_violations,
            "d_norm_increases": self.d_violations,
            "lambda_above_fixed_point": self.lambda_violations,
            "rate_bound_violations": self.rate_violations,
        }
