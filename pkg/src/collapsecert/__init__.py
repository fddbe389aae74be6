"""Exact constant-student collapse certificates for teacher-guided latent
models: simplex arithmetic, GMM teachers, a minimal autodiff engine, the
four-mode training protocol, and certificate reporting.
"""

from .autodiff import AdamHyper, AdamState, Tape, adam_step, init_adam_state
from .data import Dataset, gen_mixture, load_dataset, load_features, save_dataset
from .errors import (
    CacheMismatch,
    CollapseCertError,
    ConfigError,
    DivergedError,
    FitDegenerate,
    InternalConsistencyError,
    InvalidInput,
    ParseError,
    SearchFailed,
    ShapeError,
)
from .metrics import (
    CertificateReport,
    DiagnosticsReport,
    active_units,
    certify,
    linear_probe,
    psnr,
    tau_sensitivity,
)
from .simplex import (
    AssignmentMatrix,
    MarginReport,
    constant_baseline_cost,
    decomposition_residual,
    entropy,
    kl,
    log_softmax,
    margin,
    mean_assignment,
    softmax,
    teacher_mi,
)
from .teacher import (
    EmConfig,
    FeasibilityThresholds,
    GmmTeacher,
    TargetCache,
    TeacherDiagnostics,
    assign,
    assign_rows,
    cache_targets,
    diagnostics,
    em_fit,
    fingerprint,
    kmeanspp_init,
    load_cache,
    load_teacher,
    save_cache,
    save_teacher,
    search,
)
from .trainer import (
    DriftProbe,
    LambdaSchedule,
    RunConfig,
    TargetSet,
    drift_probe,
    free_logit_flow_check,
    lambda_schedule,
    train,
    warmup,
)
from .vae import (
    Checkpoint,
    LossBreakdown,
    LossWeights,
    ModelDims,
    ModelParams,
    decode,
    encode,
    init_params,
    load_checkpoint,
    losses,
    raw_witness,
    save_checkpoint,
)

__version__ = "0.1.0"
