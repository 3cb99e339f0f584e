"""Multi-run orchestration behind the command-line tool.

Each ``cmd_*`` function takes a validated :class:`ExperimentConfig` and an
output directory, writes its artefacts there and returns a small summary.
"""

from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import __version__
from .adaptation import EvalReport, evaluate_baseline, evaluate_method, multi_gd_adapt
from .baselines import bm_fit
from .config import ConfigError, ExperimentConfig
from .dynamics import InitSpec, MetaParams, TraceRecord, init_params, trace_record, train
from .task_model import (
    GroundTruth,
    RngSpec,
    load_ground_truth,
    make_ground_truth,
    sample_tasks,
    sample_test_tasks,
    save_ground_truth,
)
from .theory import (
    TrajectoryMonitor,
    check_convergence_conditions,
    fixed_point_residual,
    lambda_star,
    loss_ordering_chain,
    mc_wwtop,
    wwtop_expectation,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
AGGREGATE_COLUMNS = [c for c in TraceRecord.columns() if c not in ("step", "wall_ms")]


class VerificationFailed(RuntimeError):
    pass


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    seeds: list[int]
    outputs: dict[str, list[str]] = field(default_factory=dict)
    wall_seconds: float = 0.0
    regime: str = ""

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, **asdict(self)}, indent=2, sort_keys=True))
        return path


def run_seed(cfg: ExperimentConfig, run: int) -> RngSpec:
    return RngSpec(cfg.seed).child(run)


def make_run_ground_truth(cfg: ExperimentConfig, run: int) -> GroundTruth:
    g = cfg.ground_truth
    return make_ground_truth(g.d, g.k, g.cov_spec, g.mean_spec, g.noise_var, rng=run_seed(cfg, run))


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path: Path, header: list[str], rows) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def save_params(path, params: MetaParams) -> Path:
    path = Path(path)
    np.savez(path, b=params.b, w=params.w, alpha=params.alpha, beta=params.beta)
    return path


def load_params(path) -> MetaParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"params file not found: {path}")
    with np.load(path) as z:
        return MetaParams(z["b"], z["w"], float(z["alpha"]), float(z["beta"]))


# -- training -------------------------------------------------------------------


def train_one(cfg: ExperimentConfig, run: int, on_step=None):
    """One training run; returns ``(ground_truth, params, trace_records, extras)``."""
    rs = run_seed(cfg, run)
    gt = make_run_ground_truth(cfg, run)
    ln, tr = cfg.learner, cfg.training
    records: list[TraceRecord] = []
    if cfg.regime == "burer_monteiro":
        batch = sample_tasks(gt, tr.n_tasks, tr.m_in, tr.m_out, rs)
        fa = cfg.factorisation
        init = InitSpec(fa.b_scale, 0.01 * ln.k_prime * ln.alpha)
        state = bm_fit(batch, ln.k_prime, init, fa.minimizer(), rs, reg_weight=fa.reg_weight)
        params = MetaParams(state.b, np.zeros(ln.k_prime), ln.alpha, ln.beta)
        records.append(trace_record(state.n_iters, state.b, None, gt))
        return gt, params, records, {"bm": state}
    params = init_params(gt, ln.k_prime, ln.init_spec(), rs, alpha=ln.alpha, beta=ln.beta)
    final = train(params, gt, tr.schedule(), cfg.regime, rs, records.append, on_step=on_step)
    return gt, final, records, {}


def aggregate_traces(per_run: list[list[TraceRecord]]) -> list[list]:
    """Mean and population std over runs for each logged step."""
    steps = [r.step for r in per_run[0]]
    rows = []
    for i, step in enumerate(steps):
        row: list = [step]
        for col in AGGREGATE_COLUMNS:
            vals = np.array([getattr(run[i], col) for run in per_run], dtype=float)
            row += [float(np.mean(vals)), float(np.std(vals))]
        rows.append(row)
    return rows


def aggregate_header() -> list[str]:
    return ["step"] + [f"{c}_{s}" for c in AGGREGATE_COLUMNS for s in ("mean", "std")]


def cmd_train(cfg: ExperimentConfig, out) -> RunManifest:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.regime == "burer_monteiro":
        warnings.warn("alpha and beta are not used by the burer_monteiro regime (alpha only sets the head init scale)")
    start = time.perf_counter()
    manifest = RunManifest(cfg.hash(), __version__, [], {"traces": [], "params": [], "ground_truth": []},
                           regime=cfg.regime)
    traces = []
    for run in range(cfg.n_runs):
        run_dir = out / f"run_{run:03d}"
        run_dir.mkdir(exist_ok=True)
        gt, params, records, extras = train_one(cfg, run)
        trace_path = _write_rows(run_dir / "trace.csv", TraceRecord.columns(), [r.row() for r in records])
        params_path = save_params(run_dir / "params.npz", params)
        gt_path, _ = save_ground_truth(run_dir / "ground_truth", gt, seed=cfg.seed, run=run)
        if "bm" in extras:
            extras["bm"].write_log(run_dir / "convergence.csv")
        manifest.seeds.append(run_seed(cfg, run).seed)
        manifest.outputs["traces"].append(str(trace_path))
        manifest.outputs["params"].append(str(params_path))
        manifest.outputs["ground_truth"].append(str(gt_path))
        traces.append(records)
        log.info("run %d done", run)
    agg = _write_rows(out / "aggregate.csv", aggregate_header(), aggregate_traces(traces))
    manifest.outputs["aggregate"] = [str(agg)]
    cfg.dump(out / "config.yaml")
    manifest.wall_seconds = time.perf_counter() - start
    manifest.write(out / "manifest.json")
    return manifest


# -- evaluation -----------------------------------------------------------------


def _resolve_params(source) -> tuple[str, list[tuple[Path, Path]]]:
    """``(label, [(params.npz, ground_truth.npz)])`` from a train dir or params file."""
    source = Path(source)
    if source.is_dir():
        runs = sorted(p for p in source.glob("run_*") if p.is_dir())
        if not runs:
            raise FileNotFoundError(f"no run_* directories under {source}")
        label = source.name
        manifest = source / "manifest.json"
        if manifest.exists():
            label = json.loads(manifest.read_text()).get("regime") or label
        pairs = [(r / "params.npz", r / "ground_truth.npz") for r in runs]
    else:
        pairs = [(source, source.parent / "ground_truth.npz")]
        label = source.parent.parent.name
    for params, gt in pairs:
        if not params.exists():
            raise FileNotFoundError(f"params file not found: {params}")
        if not gt.exists():
            raise FileNotFoundError(f"ground truth not found next to {params}")
    return label, pairs


def _table_rows(per_run_reports: dict[str, list[EvalReport]]):
    rows = []
    for method, reports in per_run_reports.items():
        keys = [(r.adaptation, r.m_test) for r in reports[0].rows]
        for adaptation, m_test in keys:
            vals = np.array([rep.lookup(reports[0].rows[0].method, adaptation, m_test).mean for rep in reports])
            lams = [rep.lookup(reports[0].rows[0].method, adaptation, m_test).lam for rep in reports]
            rows.append({"method": method, "adaptation": adaptation, "m_test": m_test,
                         "mean": float(np.mean(vals)), "std": float(np.std(vals)), "n_runs": len(vals),
                         "per_run": [float(v) for v in vals], "lambdas": lams})
    return rows


def cmd_evaluate(cfg: ExperimentConfig, out, params_sources=(), include_baselines: bool = True) -> dict:
    """Table of excess risks: rows are methods, columns ``(m_test, adaptation)``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ecfg = cfg.eval.eval_config(cfg.learner.alpha)
    reports: dict[str, list[EvalReport]] = {}
    gts_for_baselines: list[GroundTruth] = []
    for source in params_sources:
        label, pairs = _resolve_params(source)
        adaptations = ("ridge",) if label == "burer_monteiro" else ("one_gd", "ridge")
        sub = cfg.eval.eval_config(cfg.learner.alpha, adaptations)
        base, n = label, 2
        while label in reports:
            label = f"{base}_{n}"
            n += 1
        reports[label] = []
        for run, (params_path, gt_path) in enumerate(pairs):
            params = load_params(params_path)
            gt = load_ground_truth(gt_path)
            if len(gts_for_baselines) <= run:
                gts_for_baselines.append(gt)
            reports[label].append(evaluate_method(params.b, params.w, gt, sub, RngSpec(cfg.seed).child(run, 99),
                                                  method=label))
    if include_baselines:
        if not gts_for_baselines:
            gts_for_baselines = [make_run_ground_truth(cfg, run) for run in range(cfg.n_runs)]
        for kind in ("single_task", "oracle"):
            reports[kind] = [evaluate_baseline(kind, gt, ecfg, RngSpec(cfg.seed).child(run, 99))
                             for run, gt in enumerate(gts_for_baselines)]
    rows = _table_rows(reports)
    payload = {"schema_version": SCHEMA_VERSION, "config_hash": cfg.hash(), "rows": rows}
    (out / "table.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    _write_rows(out / "table.csv", ["method", "adaptation", "m_test", "mean", "std", "n_runs"],
                [[r["method"], r["adaptation"], r["m_test"], r["mean"], r["std"], r["n_runs"]] for r in rows])
    return payload


# -- sweeps -----------------------------------------------------------------------


def cmd_sweep(cfg: ExperimentConfig, out, param: str | None = None, values=None) -> Path:
    """Long-format CSV with one row per (sweep value, step).

    ``eval.gd_steps`` sweeps the number of test-time gradient steps on the
    representation trained once per run; any other dotted key retrains.
    """
    param = param or cfg.sweep.param
    values = list(values if values is not None else cfg.sweep.values)
    if not param or not values:
        raise ConfigError(["sweep needs a parameter and at least one value"])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if param == "eval.gd_steps":
        path = _sweep_adaptation_steps(cfg, out, [int(v) for v in values])
    else:
        rows = []
        for value in values:
            sub = cfg.with_override(param, value)
            traces = [train_one(sub, run)[2] for run in range(sub.n_runs)]
            rows += [[param, value] + row for row in aggregate_traces(traces)]
        path = _write_rows(out / "sweep.csv", ["param", "value"] + aggregate_header(), rows)
    cfg.dump(out / "config.yaml")
    return path


def _sweep_adaptation_steps(cfg: ExperimentConfig, out: Path, values: list[int]) -> Path:
    n_max = max(values)
    per_run = {m: [] for m in cfg.eval.m_test}
    for run in range(cfg.n_runs):
        gt, params, _, _ = train_one(cfg, run)
        for m_test in cfg.eval.m_test:
            x, y, ws = sample_test_tasks(gt, cfg.eval.n_test_tasks, m_test, RngSpec(cfg.seed).child(run, 98, m_test))
            res = multi_gd_adapt(params.b, params.w, x, y, cfg.eval.gd_step, n_max, gt, ws)
            risks = np.full(n_max + 1, np.nan)
            risks[: res.risks.size] = res.risks
            per_run[m_test].append(risks)
    rows = []
    for value in values:
        for m_test, runs in per_run.items():
            vals = np.array([r[value] for r in runs])
            rows.append(["eval.gd_steps", value, m_test, float(np.mean(vals)), float(np.std(vals))])
    return _write_rows(out / "sweep.csv", ["param", "value", "m_test", "risk_mean", "risk_std"], rows)


# -- verification -------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def cmd_verify(cfg: ExperimentConfig, out=None) -> list[CheckResult]:
    """Run the theory checks on the configured (single-run) ground truth."""
    gt = make_run_ground_truth(cfg, 0)
    ln, th = cfg.learner, cfg.theory
    m_in = cfg.training.m_in
    results: list[CheckResult] = []

    if gt.is_isotropic:
        report = check_convergence_conditions(gt, ln.alpha, ln.beta, ln.init_spec(), th.c1, th.c2, m_in)
        for name, ok, lhs, rhs, margin in report.rows():
            results.append(CheckResult(f"condition:{name}", ok, f"lhs={lhs:.6g} rhs={rhs:.6g} margin={margin:.3g}"))
    else:
        results.append(CheckResult("condition:applicable", True, "anisotropic Sigma*, conditions not stated"))

    lam = lambda_star(gt, ln.alpha, m_in).lambda_star * th.lambda_scale
    resid = fixed_point_residual(gt, ln.alpha, ln.beta, m_in, lam=lam)
    results.append(CheckResult("fixed_point_residual", resid <= th.fixed_point_tol, f"{resid:.3e}"))

    if gt.is_centered:
        rs = run_seed(cfg, 0)
        params = init_params(gt, ln.k_prime, ln.init_spec(), rs, alpha=ln.alpha, beta=ln.beta)
        monitor = TrajectoryMonitor(gt, ln.alpha, ln.beta, m_in)
        sched = cfg.training.schedule()
        sched.n_steps = th.verify_steps
        train(params, gt, sched, "inf_tasks", rs, on_step=monitor)
        s = monitor.summary()
        results.append(CheckResult("rate_bound_domination", s["rate_bound_violations"] == 0,
                                   f"{s['rate_bound_violations']} violations over {s['steps']} steps"))
        for key in ("w_norm_increases", "d_norm_increases", "lambda_above_fixed_point"):
            results.append(CheckResult(f"monotone:{key}", s[key] == 0, f"{s[key]} violations"))

    for n, d in ((1, 3), (5, 4), (20, 10)):
        v = np.zeros(d)
        v[0] = 1.0
        mean, se = mc_wwtop(n, v, d, th.wwtop_trials, RngSpec(cfg.seed).child(7, n, d))
        upper = np.triu_indices(d)
        z = float(np.max(np.abs(mean - wwtop_expectation(n, v))[upper] / np.maximum(se[upper], 1e-300)))
        # keep the family-wise false-alarm rate at the two-sided 3-sigma level
        crit = float(norm.isf(norm.sf(3.0) / upper[0].size))
        results.append(CheckResult(f"wwtop(n={n},d={d})", z <= crit, f"max |z| = {z:.2f} (<= {crit:.2f})"))

    if gt.is_centered:
        gen = RngSpec(cfg.seed).generator("verify_point")
        b = gen.standard_normal((gt.d, ln.k_prime)) / np.sqrt(gt.d)
        w = gen.standard_normal(ln.k_prime) / np.sqrt(ln.k_prime)
        chain = loss_ordering_chain(b, w, gt, ln.alpha, m_in, th.chain_trials, RngSpec(cfg.seed).child(8))
        detail = " >= ".join(f"{v:.4f}" for v in chain.losses)
        results.append(CheckResult("loss_ordering_chain", chain.passed, detail))

    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "verify.csv", ["check", "passed", "detail"],
                    [[r.name, r.passed, r.detail] for r in results])
    return results
