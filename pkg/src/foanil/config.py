"""Experiment configuration: YAML in, validated dataclasses out."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .adaptation import DEFAULT_LAMBDA_GRID, EvalConfig
from .baselines import MinimizerConfig
from .dynamics import MODES, InitSpec, Schedule
from .task_model import _parse_spec, covariance_from_spec

REGIMES = MODES + ("burer_monteiro",)


class ConfigError(ValueError):
    """Raised with every failed check, one per line."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class GroundTruthSection:
    d: int = 50
    k: int = 5
    cov_spec: str = "diag_linear"
    mean_spec: str = "zero"
    noise_var: float = 2.0


@dataclass
class LearnerSection:
    k_prime: int = 50
    alpha: float = 0.025
    beta: float = 0.025
    b_scale: float | None = None
    w_scale: float | None = None

    def init_spec(self) -> InitSpec:
        default = InitSpec.default(self.alpha, self.k_prime)
        return InitSpec(default.b_scale if self.b_scale is None else self.b_scale,
                        default.w_scale if self.w_scale is None else self.w_scale)


@dataclass
class TrainingSection:
    n_tasks: int = 5000
    m_in: int = 20
    m_out: int = 10
    n_steps: int = 5000
    cadence: int = 50
    resample: bool = False

    def schedule(self) -> Schedule:
        return Schedule(self.n_steps, self.cadence, self.n_tasks, self.m_in, self.m_out, self.resample)


@dataclass
class FactorisationSection:
    method: str = "lbfgs"
    max_iters: int = 15000
    grad_tol: float = 1e-5
    history: int = 10
    rel_tol: float = 2.220446049250313e-09
    reg_weight: float = 0.125
    b_scale: float = 0.01

    def minimizer(self) -> MinimizerConfig:
        return MinimizerConfig(method=self.method, max_iters=self.max_iters,
                               grad_tol=self.grad_tol, history=self.history, rel_tol=self.rel_tol)


@dataclass
class EvalSection:
    n_test_tasks: int = 10000
    m_test: list[int] = field(default_factory=lambda: [20, 30])
    n_val_tasks: int = 2000
    lambda_grid: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    gd_step: float = 0.01
    gd_steps: int = 0

    def eval_config(self, alpha: float, adaptations=("one_gd", "ridge")) -> EvalConfig:
        return EvalConfig(self.n_test_tasks, tuple(self.m_test), self.n_val_tasks,
                          tuple(self.lambda_grid), alpha, tuple(adaptations), self.gd_step, self.gd_steps)


@dataclass
class TheorySection:
    c1: float = 0.5
    c2: float = 0.5
    verify_steps: int = 2000
    wwtop_trials: int = 200000
    chain_trials: int = 50000
    lambda_scale: float = 1.0
    fixed_point_tol: float = 1e-10


@dataclass
class SweepSection:
    param: str = ""
    values: list[Any] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_runs: int = 10
    regime: str = "finite_anil"
    ground_truth: GroundTruthSection = field(default_factory=GroundTruthSection)
    learner: LearnerSection = field(default_factory=LearnerSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    factorisation: FactorisationSection = field(default_factory=FactorisationSection)
    eval: EvalSection = field(default_factory=EvalSection)
    theory: TheorySection = field(default_factory=TheorySection)
    sweep: SweepSection = field(default_factory=SweepSection)

    # -- construction -----------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict | None) -> "ExperimentConfig":
        problems: list[str] = []
        cfg = _build(cls, raw or {}, "", problems)
        if problems:
            raise ConfigError(problems)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"config file not found: {path}"])
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError([f"could not parse {path}: {exc}"]) from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(["top level of the config must be a mapping"])
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def with_override(self, dotted: str, value) -> "ExperimentConfig":
        raw = copy.deepcopy(self.to_dict())
        node = raw
        parts = dotted.split(".")
        for key in parts[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError([f"unknown config section in {dotted!r}"])
            node = node[key]
        if parts[-1] not in node:
            raise ConfigError([f"unknown config key {dotted!r}"])
        node[parts[-1]] = value
        return ExperimentConfig.from_dict(raw)

    # -- validation -------------------------------------------------------------

    def validate(self) -> None:
        p: list[str] = []
        gt, ln, tr, ev = self.ground_truth, self.learner, self.training, self.eval
        if self.regime not in REGIMES:
            p.append(f"regime must be one of {list(REGIMES)}, got {self.regime!r}")
        if self.n_runs < 1:
            p.append("n_runs must be >= 1")
        if gt.k < 1 or gt.d <= gt.k:
            p.append(f"need 1 <= k < d, got k={gt.k}, d={gt.d}")
        if gt.noise_var < 0:
            p.append("noise_var must be >= 0")
        try:
            covariance_from_spec(gt.cov_spec, max(gt.k, 1))
        except ValueError as exc:
            p.append(f"cov_spec: {exc}")
        try:
            if _parse_spec(gt.mean_spec)[0] not in ("zero", "sphere"):
                p.append(f"mean_spec must be zero or sphere(r), got {gt.mean_spec!r}")
        except ValueError as exc:
            p.append(f"mean_spec: {exc}")
        if not gt.k <= ln.k_prime <= gt.d:
            p.append(f"need k <= k_prime <= d, got k_prime={ln.k_prime}")
        if ln.alpha <= 0 or ln.beta <= 0:
            p.append("alpha and beta must be > 0")
        for name in ("b_scale", "w_scale"):
            value = getattr(ln, name)
            if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
                p.append(f"learner.{name} must be a number or null")
        if isinstance(ln.b_scale, (int, float)) and ln.b_scale <= 0:
            p.append("learner.b_scale must be > 0")
        if isinstance(ln.w_scale, (int, float)) and ln.w_scale < 0:
            p.append("learner.w_scale must be >= 0")
        if tr.n_tasks < 1 or tr.m_in < 1 or tr.m_out < 1:
            p.append("n_tasks, m_in and m_out must be >= 1")
        if tr.n_steps < 0:
            p.append("n_steps must be >= 0")
        if tr.cadence < 1:
            p.append("cadence must be >= 1")
        if self.regime == "inf_tasks" and gt.mean_spec.strip() != "zero":
            p.append("regime inf_tasks requires mean_spec = zero")
        if self.factorisation.method not in ("lbfgs", "gd"):
            p.append("factorisation.method must be lbfgs or gd")
        if self.factorisation.max_iters < 0:
            p.append("factorisation.max_iters must be >= 0")
        if ev.n_test_tasks < 1 or ev.n_val_tasks < 1:
            p.append("eval task counts must be >= 1")
        if not ev.m_test or any(m < 1 for m in ev.m_test):
            p.append("eval.m_test must be a non-empty list of positive integers")
        if not ev.lambda_grid or any(v <= 0 for v in ev.lambda_grid):
            p.append("eval.lambda_grid must be non-empty and positive")
        if ev.gd_step <= 0:
            p.append("eval.gd_step must be > 0")
        th = self.theory
        if th.verify_steps < 0 or th.wwtop_trials < 1 or th.chain_trials < 2:
            p.append("theory step/trial counts out of range")
        if p:
            raise ConfigError(p)


def _build(cls, raw: dict, prefix: str, problems: list[str]):
    if not isinstance(raw, dict):
        problems.append(f"{prefix or 'config'} must be a mapping")
        return cls()
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            problems.append(f"unknown key {prefix}{key!r}")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in raw:
            continue
        value = raw[name]
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{prefix}{name}.", problems)
            continue
        kwargs[name] = _coerce(value, current, f"{prefix}{name}", problems)
    return cls(**kwargs)


def _coerce(value, current, where: str, problems: list[str]):
    if value is None or current is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            problems.append(f"{where} must be a boolean")
            return current
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{where} must be an integer")
            return current
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{where} must be a number")
            return current
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            problems.append(f"{where} must be a string")
            return current
        return value
    if isinstance(current, list):
        if not isinstance(value, list):
            problems.append(f"{where} must be a list")
            return current
        return value
    return value
