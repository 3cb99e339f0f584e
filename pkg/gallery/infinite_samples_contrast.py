"""
Infinite samples per task do not unlearn the complement
=======================================================

With exact per-task moments the complement part of the representation never
moves.  With twenty samples per task it shrinks steadily.
"""

from foanil import make_ground_truth
from foanil.dynamics import InitSpec, Schedule, init_params, train

gt = make_ground_truth(50, 5, rng=0)
init = InitSpec.default(0.025, 50)

for mode in ("inf_samples", "inf_tasks"):
    params = init_params(gt, 50, init, rng=3)
    records = []
    train(params, gt, Schedule(n_steps=5000, cadence=5000, n_tasks=2000), mode, rng=3,
          trace_sink=records.append)
    first, last = records[0].sv2_mean_D, records[-1].sv2_mean_D
    print(f"{mode:12s} mean sv2 of D: {first:.3f} -> {last:.3f} ({(last - first) / first:+.1%})")
