"""
Factorisation and ridge baselines
=================================

Joint factorisation fits the representation and every training head at once.
Ridge then adapts a head per test task.
"""

import numpy as np

from foanil import make_ground_truth, sample_tasks
from foanil.adaptation import EvalConfig, evaluate_baseline, evaluate_method
from foanil.baselines import MinimizerConfig, bm_fit, ridge_regression

gt = make_ground_truth(20, 3, noise_var=1.0, rng=0)
batch = sample_tasks(gt, n_tasks=500, m_in=20, m_out=10, rng=1)

state = bm_fit(batch, k_prime=20, cfg=MinimizerConfig(max_iters=500), rng=2)
print(f"L-BFGS: {state.n_iters} iterations, converged={state.converged}, "
      f"loss {state.log[0]['loss']:.3f} -> {state.log[-1]['loss']:.3f}")

# spectrum of the fitted Gram matrix: a few large directions and a long tail
print("top singular values of B:", np.linalg.svd(state.b, compute_uv=False)[:6].round(2))

###############################################################################
# Ridge on one design, then the whole evaluation protocol.

x, y = batch.x_in[0] @ gt.b_star, batch.y_in[0]
print("ridge head:", ridge_regression(x, y, lam=0.01).round(3), "true:", batch.w_star[0].round(3))

cfg = EvalConfig(n_test_tasks=2000, n_val_tasks=500, adaptations=("ridge",))
for report in (evaluate_method(state.b, None, gt, cfg, rng=5, method="factorisation"),
               evaluate_baseline("single_task", gt, cfg, rng=5),
               evaluate_baseline("oracle", gt, cfg, rng=5)):
    for row in report.rows:
        print(f"{row.method:>14s} m_test={row.m_test} risk {row.mean:.3f} (lambda {row.lam:g})")
