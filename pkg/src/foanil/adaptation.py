"""Test-time adaptation of a learnt representation and excess-risk evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .task_model import GroundTruth, RngSpec, sample_test_tasks

__all__ = [
    "EvalConfig",
    "EvalReport",
    "RiskSummary",
    "MultiStepResult",
    "one_gd_adapt",
    "multi_gd_adapt",
    "excess_risk",
    "evaluate_method",
    "evaluate_baseline",
    "prop2_bound",
    "DEFAULT_LAMBDA_GRID",
]

SCHEMA_VERSION = 1
DEFAULT_LAMBDA_GRID = tuple(float(v) for v in np.logspace(-4, 2, 13))
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def _design(b_hat, x):
    return x if b_hat is None else x @ b_hat


def one_gd_adapt(b_hat: np.ndarray, w_hat: np.ndarray, x: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    """Head after one gradient step on ``||y - X B w||^2 / (2m)`` from ``w_hat``.

    ``x`` may hold one task ``(m, d)`` or a stack ``(n, m, d)``.
    """
    f = _design(b_hat, x)
    m = x.shape[-2]
    resid = f @ w_hat - y
    return w_hat - (alpha / m) * np.einsum("...mp,...m->...p", f, resid)


@dataclass
class MultiStepResult:
    heads: np.ndarray
    risks: np.ndarray | None
    diverged: bool


def multi_gd_adapt(b_hat, w_hat, x, y, step: float, n_steps: int, gt: GroundTruth | None = None,
                   w_star: np.ndarray | None = None) -> MultiStepResult:
    """``n_steps`` full-batch gradient steps on the head.

    ``heads[s]`` is the head after ``s`` steps.  When ``gt`` and ``w_star`` are
    given, ``risks[s]`` is the mean excess risk after ``s`` steps.  Overflow
    stops the run and sets ``diverged``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    f = _design(b_hat, x)
    m = x.shape[-2]
    head = np.broadcast_to(w_hat, f.shape[:-2] + (f.shape[-1],)).astype(float)
    heads = [head]
    track = gt is not None and w_star is not None
    risks = [float(np.mean(excess_risk(b_hat, head, gt, w_star)))] if track else []
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n_steps):
            resid = np.einsum("...mp,...p->...m", f, head) - y
            head = head - (step / m) * np.einsum("...mp,...m->...p", f, resid)
            if not np.all(np.isfinite(head)):
                diverged = True
                break
            heads.append(head)
            if track:
                risks.append(float(np.mean(excess_risk(b_hat, head, gt, w_star))))
    return MultiStepResult(np.stack(heads), np.array(risks) if track else None, diverged)


def excess_risk(b_hat: np.ndarray, head: np.ndarray, gt: GroundTruth, w_star: np.ndarray):
    """``||B_hat head - B* w*||^2``, batched over leading axes.

    ``b_hat = None`` treats ``head`` as a ``d``-dimensional parameter.
    """
    pred = head if b_hat is None else head @ b_hat.T
    diff = pred - w_star @ gt.b_star.T
    return np.einsum("...d,...d->...", diff, diff)


def _fsum_mean(values: np.ndarray) -> float:
    return math.fsum(np.asarray(values, dtype=float).ravel().tolist()) / values.size


class _RidgePath:
    """Excess risk of ridge heads for many ``lambda`` from one batched SVD.

    With ``F = U S V^T`` the ridge prediction is ``B V diag(s/(s^2 + 2 lam m)) U^T y``.
    """

    def __init__(self, b_hat, x, y, theta_star, chunk=2000):
        m = x.shape[1]
        self.m = m
        parts = []
        for lo in range(0, x.shape[0], chunk):
            f = _design(b_hat, x[lo:lo + chunk])
            u, s, vt = np.linalg.svd(f, full_matrices=False)
            g = np.swapaxes(vt, 1, 2)
            if b_hat is not None:
                g = b_hat @ g
            uty = np.einsum("nmr,nm->nr", u, y[lo:lo + chunk])
            gram = np.swapaxes(g, 1, 2) @ g
            proj = np.einsum("ndr,nd->nr", g, theta_star[lo:lo + chunk])
            parts.append((s, uty, gram, proj))
        self.s = np.concatenate([p[0] for p in parts])
        self.uty = np.concatenate([p[1] for p in parts])
        self.gram = np.concatenate([p[2] for p in parts])
        self.proj = np.concatenate([p[3] for p in parts])
        self.theta_sq = np.einsum("nd,nd->n", theta_star, theta_star)

    def risks(self, lam: float) -> np.ndarray:
        s = self.s
        with np.errstate(divide="ignore", invalid="ignore"):
            shrink = np.where(s > 0, s / (s * s + 2.0 * lam * self.m), 0.0)
        c = shrink * self.uty
        quad = np.einsum("nr,nrq,nq->n", c, self.gram, c)
        return np.maximum(quad - 2.0 * np.einsum("nr,nr->n", self.proj, c) + self.theta_sq, 0.0)


@dataclass(frozen=True)
class EvalConfig:
    n_test_tasks: int = 10000
    m_test: tuple[int, ...] = (20, 30)
    n_val_tasks: int = 2000
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    alpha: float = 0.025
    adaptations: tuple[str, ...] = ("one_gd", "ridge")
    gd_step: float = 0.01
    gd_steps: int = 0

    def __post_init__(self):
        bad = [a for a in self.adaptations if a not in ("one_gd", "ridge", "k_gd")]
        if bad:
            raise ValueError(f"unknown adaptations {bad}")
        if self.n_test_tasks < 1 or self.n_val_tasks < 1 or not self.m_test:
            raise ValueError("need at least one test task, one validation task and one m_test")
        if any(v <= 0 for v in self.lambda_grid):
            raise ValueError("lambda grid must be positive")


@dataclass
class RiskSummary:
    method: str
    adaptation: str
    m_test: int
    mean: float
    quantiles: dict[str, float]
    lam: float | None = None
    per_step: list[float] | None = None


@dataclass
class EvalReport:
    rows: list[RiskSummary] = field(default_factory=list)

    def lookup(self, method: str, adaptation: str, m_test: int) -> RiskSummary:
        for r in self.rows:
            if (r.method, r.adaptation, r.m_test) == (method, adaptation, m_test):
                return r
        raise KeyError((method, adaptation, m_test))

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "rows": [asdict(r) for r in self.rows]}

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def from_dict(cls, payload: dict) -> "EvalReport":
        return cls([RiskSummary(**r) for r in payload["rows"]])


def _summary(method, adaptation, m_test, risks, lam=None, per_step=None) -> RiskSummary:
    qs = np.quantile(np.sort(risks), QUANTILES)
    return RiskSummary(method, adaptation, int(m_test), _fsum_mean(risks),
                       {f"q{int(q * 100):02d}": float(v) for q, v in zip(QUANTILES, qs)}, lam, per_step)


def _tasks(gt, cfg, m_test, rng: RngSpec):
    test = sample_test_tasks(gt, cfg.n_test_tasks, m_test, rng.child(1, m_test))
    val = sample_test_tasks(gt, cfg.n_val_tasks, m_test, rng.child(2, m_test))
    return test, val


def _select_lambda(b_hat, val, gt, grid):
    xv, yv, wv = val
    path = _RidgePath(b_hat, xv, yv, wv @ gt.b_star.T)
    scores = [_fsum_mean(path.risks(lam)) for lam in grid]
    return float(grid[int(np.argmin(scores))])


def evaluate_method(b_hat: np.ndarray | None, w_hat: np.ndarray | None, gt: GroundTruth,
                    cfg: EvalConfig = EvalConfig(), rng=0, method: str = "learnt") -> EvalReport:
    """Excess risk of adapting ``(b_hat, w_hat)`` on fresh test tasks.

    ``b_hat = None`` means raw ``d``-dimensional features.  Ridge picks its
    ``lambda`` on a disjoint validation set by mean excess risk.  Test and
    validation tasks depend only on ``rng`` and ``m_test``, so every method
    sees the same tasks.
    """
    rng = RngSpec(int(rng)) if isinstance(rng, (int, np.integer)) else rng
    report = EvalReport()
    for m_test in cfg.m_test:
        (x, y, ws), val = _tasks(gt, cfg, m_test, rng)
        for adaptation in cfg.adaptations:
            if adaptation == "one_gd":
                heads = one_gd_adapt(b_hat, w_hat, x, y, cfg.alpha)
                report.rows.append(_summary(method, "one_gd", m_test, excess_risk(b_hat, heads, gt, ws)))
            elif adaptation == "ridge":
                lam = _select_lambda(b_hat, val, gt, cfg.lambda_grid)
                risks = _RidgePath(b_hat, x, y, ws @ gt.b_star.T).risks(lam)
                report.rows.append(_summary(method, "ridge", m_test, risks, lam=lam))
            else:
                res = multi_gd_adapt(b_hat, w_hat, x, y, cfg.gd_step, cfg.gd_steps, gt, ws)
                final = excess_risk(b_hat, res.heads[-1], gt, ws)
                report.rows.append(_summary(method, f"gd_{cfg.gd_steps}", m_test, final,
                                            per_step=[float(v) for v in res.risks]))
    return report


def evaluate_baseline(kind: str, gt: GroundTruth, cfg: EvalConfig = EvalConfig(), rng=0) -> EvalReport:
    """Single-task ridge on raw features or oracle ridge on ``X B*``."""
    if kind == "single_task":
        b_hat = None
    elif kind == "oracle":
        b_hat = gt.b_star
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    sub = EvalConfig(**{**asdict(cfg), "adaptations": ("ridge",)})
    return evaluate_method(b_hat, None, gt, sub, rng, method=kind)


def prop2_bound(w_star_norm: float, gt: GroundTruth, m_in: float, m_test: int) -> float:
    """High-probability bound on ``||B w_test - B* w*||`` at the fixed point.

    Sum of a bias term, a feature-concentration term and a noise term with
    explicit constants.
    """
    k = gt.k
    if m_test < k:
        raise ValueError(f"need m_test >= k = {k}, got {m_test}")
    sb2 = gt.sigma_bar2
    m = float(m_in)
    eigs = np.linalg.eigvalsh(gt.sigma_star)
    lam_min, op = float(eigs[0]), float(eigs[-1])
    bias = (1 + sb2 / (lam_min + sb2 / m)) / (m + 1) * w_star_norm
    factor = 1 - (1 + sb2 / (op + sb2 / m)) / (m + 1)
    ratio = k / m_test
    spread = 3 * factor * max(2 * math.sqrt(ratio), 4 * ratio) * w_star_norm
    noise = 36 * factor * math.sqrt(gt.noise_var) * math.sqrt(ratio)
    return float(bias + spread + noise)
