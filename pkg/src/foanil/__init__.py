"""First-order ANIL on the multi-task linear representation model."""

from .task_model import (
    DimensionError,
    GroundTruth,
    RngSpec,
    TaskBatch,
    make_ground_truth,
    sample_tasks,
    sample_test_task,
    sample_test_tasks,
)
from .dynamics import (
    InitSpec,
    MetaParams,
    Schedule,
    TraceRecord,
    UnsupportedConfiguration,
    foanil_step,
    fomaml_step,
    infinite_samples_step,
    infinite_tasks_step,
    init_params,
    train,
)
from .theory import check_convergence_conditions, lambda_star, rate_bound

__version__ = "0.1.0"
