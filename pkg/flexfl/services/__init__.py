"""Simulation and optimization services"""

from .phy import (
    ClientProfile,
    Scenario,
    ChannelRealization,
    DelayBreakdown,
    InvalidGeometryError,
    DeepFadeError,
    ScheduleError,
    build_scenario,
    sample_channels,
    snr,
    ber,
    min_power,
    power_table,
    uplink_rate,
    delays,
    iterations_from_budget,
    rate_window,
    sync_rate_floor,
)

from .allocator import (
    Assignment,
    DualState,
    AllocatorReport,
    InfeasibleScheduleError,
    OracleGuardError,
    net_reward,
    select_winners,
    dual_update,
    solve,
    brute_force_reference,
    sync_fl_allocate,
    baseline_allocators,
    allocate,
)

from .datasets import (
    ExampleStore,
    ClientPartition,
    IdxFormatError,
    PartitionError,
    DatasetMissingError,
    read_idx,
    write_idx,
    load_idx,
    load_mnist,
    partition_iid,
    partition_with_sizes,
    sample_minibatch,
)

from .tasks import (
    QuadraticLoss,
    LogisticLoss,
    MLPClassifier,
    TrainTask,
)

from .synthetic import (
    SingularProblemError,
    synth_task,
    quadratic_task,
    logistic_task,
)

from .fl_core import (
    ModelVector,
    RoundSchedule,
    RoundMetrics,
    TrainingTrace,
    NonFiniteGradientError,
    EmptyAggregationError,
    BudgetViolationError,
    clip,
    local_train,
    aggregate,
    run_round,
    run_training,
    run_schedule,
)

from .convergence import (
    ConvergenceConstants,
    NonContractingBoundError,
    OptimumUnavailableError,
    phi_constants,
    gap_bound,
    bound_recurrence,
    asymptotic_bound,
    kappa2_condition,
    inequality_chain,
    estimate_constants,
    gap_vs_bound,
    replicate_gaps,
)

from .harness import (
    ExperimentSpec,
    ExperimentRunner,
    ResultBundle,
    RunResult,
    OutputError,
    create_experiment_runner,
    run_experiment,
    sweep_objective,
    emit_plot_data,
)
