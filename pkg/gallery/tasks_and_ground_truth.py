"""
Sampling a task population
==========================

Every task shares one hidden d x k representation.  A task draws its own
head, Gaussian features and noisy labels.
"""

import numpy as np

from foanil import make_ground_truth, sample_tasks

gt = make_ground_truth(d=50, k=5, cov_spec="diag_linear", noise_var=2.0, rng=0)
print("task covariance eigenvalues:", np.round(np.diag(gt.sigma_star), 3))
print("label variance sigma_bar^2 =", round(gt.sigma_bar2, 3))

###############################################################################
# The shared representation has orthonormal columns and its complement is
# available for diagnostics.

print("orthonormal:", np.allclose(gt.b_star.T @ gt.b_star, np.eye(5)))
print("complement shape:", gt.b_perp.shape)

###############################################################################
# A batch holds the inner (adaptation) rows and the outer (evaluation) rows
# of every task.

batch = sample_tasks(gt, n_tasks=2000, m_in=20, m_out=10, rng=1)
print("x_in", batch.x_in.shape, "x_out", batch.x_out.shape)

# empirical label variance matches sigma_bar^2
print("empirical E[y^2] =", round(float(np.mean(batch.y_in**2)), 3))
