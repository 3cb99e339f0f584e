"""Ground-truth structure and task sampling for the multi-task linear model.

Each task is a linear regression ``y = X B_star w_star + z`` where the columns
of ``B_star`` are orthonormal, ``w_star ~ N(mu_star, Sigma_star)``, rows of
``X`` are standard Gaussian and ``z ~ N(0, noise_var)``.
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "GroundTruth",
    "TaskBatch",
    "RngSpec",
    "make_ground_truth",
    "sample_tasks",
    "sample_test_task",
    "sample_test_tasks",
    "random_orthonormal",
    "save_ground_truth",
    "load_ground_truth",
    "save_batch",
    "load_batch",
]


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class RngSpec:
    """A seed plus named, independent random streams.

    ``generator("tasks")`` and ``generator("b_star")`` never share state, so
    drawing more tasks does not perturb the ground truth.  Extra integer keys
    (``generator("tasks", run)``) derive further sub-streams.
    """

    seed: int

    def generator(self, label: str, *keys: int) -> np.random.Generator:
        tag = zlib.crc32(label.encode("utf-8"))
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(tag, *map(int, keys)))
        return np.random.default_rng(ss)

    def child(self, *keys: int) -> "RngSpec":
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=tuple(map(int, keys)))
        return RngSpec(int(ss.generate_state(1, dtype=np.uint64)[0]))


def _stream(rng, label: str) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, (int, np.integer)):
        rng = RngSpec(int(rng))
    return rng.generator(label)


def random_orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Q factor of a Gaussian ``rows x cols`` matrix with positive diag(R)."""
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


# -- covariance / mean specifications ---------------------------------------

_SPEC_RE = re.compile(r"^\s*(\w+)\s*(?:\((.*)\))?\s*$")


def _parse_spec(spec: str) -> tuple[str, dict[str, float], list[float]]:
    match = _SPEC_RE.match(spec)
    if match is None:
        raise ValueError(f"malformed spec string {spec!r}")
    name, body = match.group(1), match.group(2)
    kwargs: dict[str, float] = {}
    args: list[float] = []
    if body:
        for part in body.split(","):
            part = part.strip()
            if not part:
                continue
            if "=" in part:
                key, val = part.split("=", 1)
                kwargs[key.strip()] = float(val)
            else:
                args.append(float(part))
    return name, kwargs, args


def covariance_from_spec(cov_spec: str, k: int) -> np.ndarray:
    """Task covariance for ``cov_spec``.

    ``isotropic(c)`` gives ``c I`` (``c`` defaults to 1).  ``diag_linear`` is
    proportional to ``diag(1..k)`` with Frobenius norm ``sqrt(k)``;
    ``diag_exp`` is proportional to ``diag(e^1..e^k)`` with Frobenius norm
    ``2 sqrt(k)``.  The diagonal specs accept ``fro=`` or ``trace=`` to pin a
    different normalisation.
    """
    name, kwargs, args = _parse_spec(cov_spec)
    if name == "isotropic":
        c = args[0] if args else kwargs.get("c", 1.0)
        if c <= 0:
            raise ValueError("isotropic scale must be positive")
        return c * np.eye(k)
    if name == "diag_linear":
        shape = np.arange(1, k + 1, dtype=float)
        default_fro = np.sqrt(k)
    elif name == "diag_exp":
        shape = np.exp(np.arange(1, k + 1, dtype=float))
        default_fro = 2.0 * np.sqrt(k)
    else:
        raise ValueError(f"unknown covariance spec {cov_spec!r}")
    if "trace" in kwargs:
        shape *= kwargs["trace"] / shape.sum()
    else:
        shape *= kwargs.get("fro", default_fro) / np.linalg.norm(shape)
    return np.diag(shape)


def mean_from_spec(mean_spec: str, k: int, rng: np.random.Generator) -> np.ndarray:
    name, kwargs, args = _parse_spec(mean_spec)
    if name == "zero":
        return np.zeros(k)
    if name == "sphere":
        radius = args[0] if args else kwargs.get("radius", np.sqrt(k))
        u = rng.standard_normal(k)
        return radius * u / np.linalg.norm(u)
    raise ValueError(f"unknown mean spec {mean_spec!r}")


# -- containers ---------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruth:
    b_star: np.ndarray
    sigma_star: np.ndarray
    mu_star: np.ndarray
    noise_var: float
    cov_spec: str = "custom"
    mean_spec: str = "custom"

    @property
    def d(self) -> int:
        return self.b_star.shape[0]

    @property
    def k(self) -> int:
        return self.b_star.shape[1]

    @property
    def sigma_bar2(self) -> float:
        return float(np.trace(self.sigma_star) + self.noise_var)

    @cached_property
    def b_perp(self) -> np.ndarray:
        """Orthonormal basis of the orthogonal complement of col(B_star)."""
        q, _ = np.linalg.qr(self.b_star, mode="complete")
        perp = q[:, self.k:]
        # Re-orthogonalise against b_star to wash out the QR sign convention.
        perp -= self.b_star @ (self.b_star.T @ perp)
        u, _, vt = np.linalg.svd(perp, full_matrices=False)
        return u @ vt

    @cached_property
    def task_second_moment(self) -> np.ndarray:
        return self.sigma_star + np.outer(self.mu_star, self.mu_star)

    @property
    def is_isotropic(self) -> bool:
        c = self.sigma_star[0, 0]
        return bool(c > 0 and np.allclose(self.sigma_star, c * np.eye(self.k), rtol=1e-12, atol=1e-14))

    @property
    def is_centered(self) -> bool:
        return not np.any(self.mu_star)


@dataclass
class TaskBatch:
    """``n_tasks`` tasks, each with an inner (adaptation) and an outer split."""

    x_in: np.ndarray  # (n, m_in, d)
    y_in: np.ndarray  # (n, m_in)
    x_out: np.ndarray  # (n, m_out, d)
    y_out: np.ndarray  # (n, m_out)
    w_star: np.ndarray  # (n, k)
    meta: dict = field(default_factory=dict)

    @property
    def n_tasks(self) -> int:
        return self.x_in.shape[0]

    @property
    def m_in(self) -> int:
        return self.x_in.shape[1]

    @property
    def m_out(self) -> int:
        return self.x_out.shape[1]

    @property
    def m(self) -> int:
        return self.m_in + self.m_out

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.x_in, self.x_out], axis=1)

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([self.y_in, self.y_out], axis=1)

    def subset(self, idx) -> "TaskBatch":
        return TaskBatch(self.x_in[idx], self.y_in[idx], self.x_out[idx], self.y_out[idx],
                         self.w_star[idx], dict(self.meta))


# -- sampling -----------------------------------------------------------------


def make_ground_truth(d: int, k: int, cov_spec: str = "diag_linear", mean_spec: str = "zero",
                      noise_var: float = 2.0, rng=0) -> GroundTruth:
    if not (0 < k < d):
        raise DimensionError(f"need 0 < k < d, got k={k}, d={d}")
    if noise_var < 0:
        raise ValueError("noise_var must be non-negative")
    b_star = random_orthonormal(_stream(rng, "b_star"), d, k)
    sigma = covariance_from_spec(cov_spec, k)
    mu = mean_from_spec(mean_spec, k, _stream(rng, "mean"))
    gt = GroundTruth(b_star, sigma, mu, float(noise_var), cov_spec, mean_spec)
    if not gt.sigma_bar2 > 0:
        raise ValueError("trace(Sigma_star) + noise_var must be positive")
    return gt


def _cov_sqrt(sigma: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(sigma)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _draw_w_star(gt: GroundTruth, n: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((n, gt.k))
    return gt.mu_star + z @ _cov_sqrt(gt.sigma_star).T


def _draw_regression(gt: GroundTruth, w_star: np.ndarray, m: int, rng_x, rng_z):
    n = w_star.shape[0]
    x = rng_x.standard_normal((n, m, gt.d))
    theta = w_star @ gt.b_star.T
    y = np.einsum("nmd,nd->nm", x, theta)
    if gt.noise_var > 0:
        y += np.sqrt(gt.noise_var) * rng_z.standard_normal((n, m))
    return x, y


def sample_tasks(gt: GroundTruth, n_tasks: int, m_in: int, m_out: int, rng=0) -> TaskBatch:
    """Draw ``n_tasks`` regression tasks with ``m_in + m_out`` rows each.

    The first ``m_in`` rows go to the inner split, the remaining ``m_out`` to
    the outer split.
    """
    if n_tasks < 1 or m_in < 1 or m_out < 1:
        raise DimensionError("n_tasks, m_in and m_out must all be >= 1")
    w_star = _draw_w_star(gt, n_tasks, _stream(rng, "tasks"))
    x, y = _draw_regression(gt, w_star, m_in + m_out, _stream(rng, "features"), _stream(rng, "noise"))
    return TaskBatch(
        x_in=np.ascontiguousarray(x[:, :m_in]),
        y_in=np.ascontiguousarray(y[:, :m_in]),
        x_out=np.ascontiguousarray(x[:, m_in:]),
        y_out=np.ascontiguousarray(y[:, m_in:]),
        w_star=w_star,
    )


def sample_test_tasks(gt: GroundTruth, n_tasks: int, m_test: int, rng=0):
    """Batched test tasks: ``X (n, m_test, d)``, ``y (n, m_test)``, ``w_star (n, k)``."""
    if n_tasks < 1 or m_test < 1:
        raise DimensionError("n_tasks and m_test must be >= 1")
    w_star = _draw_w_star(gt, n_tasks, _stream(rng, "test_tasks"))
    x, y = _draw_regression(gt, w_star, m_test, _stream(rng, "test_features"), _stream(rng, "test_noise"))
    return x, y, w_star


def sample_test_task(gt: GroundTruth, m_test: int, rng=0):
    x, y, w = sample_test_tasks(gt, 1, m_test, rng)
    return x[0], y[0], w[0]


# -- persistence ----------------------------------------------------------------


def _write_manifest(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def save_ground_truth(path, gt: GroundTruth, **extra) -> tuple[Path, Path]:
    """Write ``<path>.npz`` plus ``<path>.json`` (dims and spec strings)."""
    path = Path(path)
    npz, manifest = path.with_suffix(".npz"), path.with_suffix(".json")
    np.savez(npz, b_star=gt.b_star, sigma_star=gt.sigma_star, mu_star=gt.mu_star,
             noise_var=np.float64(gt.noise_var))
    _write_manifest(manifest, {"kind": "ground_truth", "d": gt.d, "k": gt.k,
                               "cov_spec": gt.cov_spec, "mean_spec": gt.mean_spec,
                               "noise_var": gt.noise_var, **extra})
    return npz, manifest


def load_ground_truth(path) -> GroundTruth:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    with np.load(path.with_suffix(".npz")) as data:
        return GroundTruth(data["b_star"], data["sigma_star"], data["mu_star"],
                           float(data["noise_var"]), meta["cov_spec"], meta["mean_spec"])


def save_batch(path, batch: TaskBatch, **extra) -> tuple[Path, Path]:
    path = Path(path)
    npz, manifest = path.with_suffix(".npz"), path.with_suffix(".json")
    np.savez(npz, x_in=batch.x_in, y_in=batch.y_in, x_out=batch.x_out,
             y_out=batch.y_out, w_star=batch.w_star)
    _write_manifest(manifest, {"kind": "task_batch", "n_tasks": batch.n_tasks,
                               "m_in": batch.m_in, "m_out": batch.m_out,
                               "d": batch.x_in.shape[2], **batch.meta, **extra})
    return npz, manifest


def load_batch(path) -> TaskBatch:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    with np.load(path.with_suffix(".npz")) as data:
        return TaskBatch(data["x_in"], data["y_in"], data["x_out"], data["y_out"],
                         data["w_star"], meta)
