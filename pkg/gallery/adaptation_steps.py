"""
How many gradient steps at test time?
=====================================

Starting from the exact fixed point, one step reaches the shrunk head; more
steps first help and then overfit the few test samples.
"""

import numpy as np

from foanil import make_ground_truth, sample_test_tasks
from foanil.adaptation import excess_risk, multi_gd_adapt, one_gd_adapt, prop2_bound
from foanil.theory import fixed_point_params

gt = make_ground_truth(50, 5, rng=0)
alpha, m_in = 0.025, 20
params = fixed_point_params(gt, alpha, alpha, m_in, k_prime=50)
x, y, w_star = sample_test_tasks(gt, 2000, 20, rng=1)

heads = one_gd_adapt(params.b, params.w, x, y, alpha)
print("one step, mean excess risk:", round(float(np.mean(excess_risk(params.b, heads, gt, w_star))), 3))

res = multi_gd_adapt(params.b, params.w, x, y, step=0.01, n_steps=2000, gt=gt, w_star=w_star)
for s in (0, 1, 5, 20, 100, 500, 2000):
    print(f"{s:5d} steps  risk {res.risks[s]:.3f}")
print("best step count:", int(np.argmin(res.risks)))

###############################################################################
# The high-probability bound on the one-step error is loose but valid.

err = np.linalg.norm(heads @ params.b.T - w_star @ gt.b_star.T, axis=1)
bound = np.array([prop2_bound(float(np.linalg.norm(w)), gt, m_in, 20) for w in w_star])
print("fraction under the bound:", float(np.mean(err <= bound)))
