"""
Training traces for the four meta-learning regimes
===================================================

A shortened run of each regime, printing the singular-value diagnostics
every few hundred steps.  ``C`` is the part of the representation inside the
true subspace and ``D`` the part in its complement.
"""

from foanil import make_ground_truth
from foanil.dynamics import InitSpec, Schedule, collect, init_params, train

gt = make_ground_truth(50, 5, rng=0)
alpha = beta = 0.025
init = InitSpec.default(alpha, 50)
schedule = Schedule(n_steps=1000, cadence=250, n_tasks=2000)

for mode in ("finite_anil", "finite_maml", "inf_tasks", "inf_samples"):
    params = init_params(gt, 50, init, rng=1, alpha=alpha, beta=beta)
    records = []
    train(params, gt, schedule, mode, rng=1, trace_sink=records.append)
    print(f"\n{mode}")
    print(f"{'step':>6s} {'min sv2 C':>10s} {'mean sv2 D':>11s} {'residual':>9s}")
    for r in records:
        print(f"{r.step:6d} {r.sv2_min_C:10.3f} {r.sv2_mean_D:11.4f} {r.lambda_residual:9.4f}")

###############################################################################
# ``collect`` turns a list of records into one array per column.

columns = collect(records)
print("\ncolumns:", ", ".join(columns))
print("complement energy over the last run:", columns["sv2_mean_D"].round(3))
