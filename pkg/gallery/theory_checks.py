"""
Monte Carlo checks of the closed forms
======================================

The head outer-product expectation, the closed-form population loss and the
ordering of losses along the projection chain.
"""

import numpy as np

from foanil import RngSpec, make_ground_truth
from foanil.theory import (
    closed_form_anil_loss,
    lambda_star,
    loss_ordering_chain,
    mc_anil_loss,
    mc_wwtop,
    wwtop_expectation,
)

v = np.array([1.0, 0.0, 0.0, 0.0])
mean, se = mc_wwtop(5, v, 4, trials=200000, rng=RngSpec(0))
z = np.abs(mean - wwtop_expectation(5, v)) / se
print("max |z| for E[S v v^T S]:", round(float(z.max()), 2))

###############################################################################
# Closed-form loss at a scaled fixed-point Gram matrix versus Monte Carlo.

gt = make_ground_truth(20, 3, cov_spec="isotropic(1)", noise_var=2.0, rng=1)
alpha, m_in = 0.025, 20
lam = lambda_star(gt, alpha, m_in).lambda_star
for scale in (0.5, 1.0, 1.5):
    b = gt.b_star * np.sqrt(scale * lam[0, 0])
    mc, mc_se = mc_anil_loss(b, np.zeros(3), gt, m_in, trials=100000, rng=2, alpha=alpha)
    print(f"scale {scale}: closed form {closed_form_anil_loss(scale * lam, gt, alpha, m_in):.4f}, "
          f"MC {mc:.4f} +- {mc_se:.4f}")

###############################################################################
# Removing the complement, then the head, then moving to the fixed point
# never increases the loss.

gen = np.random.default_rng(3)
chain = loss_ordering_chain(gen.standard_normal((20, 10)), gen.standard_normal(10) / 3, gt, alpha, m_in,
                            trials=50000, rng=4)
print(" >= ".join(f"{v:.4f}" for v in chain.losses), "holds:", chain.passed)
