"""Bundle adjustment with learned and scheduled Levenberg-Marquardt damping.

The package is organised bottom-up:

- :mod:`balm.scene` — BAL-convention scenes: camera/point containers, Rodrigues
  rotation, projection with radial distortion, synthetic scene generation, and
  BAL text (de)serialization.
- :mod:`balm.solver` — damped Levenberg-Marquardt with a Schur-complement
  camera system, the classic damping schedule, and the `solve` driver.
- :mod:`balm.policy` — the policy interface the solver consults for the next
  damping value, plus classic / fixed / scheduler / learned implementations.
- :mod:`balm.env` — the solver wrapped as a sequential decision environment
  (state windows, duration rewards, episode bookkeeping).
- :mod:`balm.nn` — a small from-scratch MLP stack (forward, backprop, Adam,
  checkpoints) used by both learners.
- :mod:`balm.sac` — soft actor-critic training of the damping agent.
- :mod:`balm.baselines` — the greedy one-step-oracle regression baseline.
- :mod:`balm.bench` — comparison runs, aggregate tables, performance profiles,
  convergence traces, schedule extraction, and the ablation suite.
- :mod:`balm.cli` — the ``balm`` command line (generate / solve / train /
  eval / profile / ablate).
"""

from .scene import (
    BAProblem,
    BalParseError,
    CameraPose,
    DegenerateDepthError,
    Observation,
    Point3,
    SceneGenerationError,
    generate_synthetic,
    parse_bal,
    project,
    project_many,
    rotate_points,
    rotation_matrix,
    serialize_bal,
)
from .solver import (
    IterationRecord,
    NumericalFailureError,
    SingularSystemError,
    SolveResult,
    damped_step,
    dense_system,
    estimation_error,
    linearize,
    lm_iterate,
    residuals,
    solve,
)
from .policy import (
    AgentPolicy,
    ClassicPolicy,
    ConstantSchedulerPolicy,
    DampingPolicy,
    FixedPolicy,
    PolicyObservation,
    ZeroNetPolicy,
    make_policy,
)
from .env import BAEnv, EnvConfig, StepOutcome, compute_reward
from .sac import (
    AgentNets,
    TrainConfig,
    init_agent,
    lambda_from_action,
    load_agent_checkpoint,
    save_agent_checkpoint,
    select_action,
    train_agent,
)
from .baselines import (
    init_zero_net,
    load_zero_net_checkpoint,
    save_zero_net_checkpoint,
    zero_net_oracle,
    zero_net_predict,
    zero_net_train,
)
from .bench import (
    ComparisonTable,
    ProfilePoint,
    RunRecord,
    ablation_suite,
    extract_schedule,
    performance_profile,
    run_comparison,
    suite_scene,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # scene
    "BAProblem",
    "BalParseError",
    "CameraPose",
    "DegenerateDepthError",
    "Observation",
    "Point3",
    "SceneGenerationError",
    "generate_synthetic",
    "parse_bal",
    "project",
    "project_many",
    "rotate_points",
    "rotation_matrix",
    "serialize_bal",
    # solver
    "IterationRecord",
    "NumericalFailureError",
    "SingularSystemError",
    "SolveResult",
    "damped_step",
    "dense_system",
    "estimation_error",
    "linearize",
    "lm_iterate",
    "residuals",
    "solve",
    # policy
    "AgentPolicy",
    "ClassicPolicy",
    "ConstantSchedulerPolicy",
    "DampingPolicy",
    "FixedPolicy",
    "PolicyObservation",
    "ZeroNetPolicy",
    "make_policy",
    # env
    "BAEnv",
    "EnvConfig",
    "StepOutcome",
    "compute_reward",
    # sac
    "AgentNets",
    "TrainConfig",
    "init_agent",
    "lambda_from_action",
    "load_agent_checkpoint",
    "save_agent_checkpoint",
    "select_action",
    "train_agent",
    # baselines
    "init_zero_net",
    "load_zero_net_checkpoint",
    "save_zero_net_checkpoint",
    "zero_net_oracle",
    "zero_net_predict",
    "zero_net_train",
    # bench
    "ComparisonTable",
    "ProfilePoint",
    "RunRecord",
    "ablation_suite",
    "extract_schedule",
    "performance_profile",
    "run_comparison",
    "suite_scene",
]
