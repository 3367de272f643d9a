"""Passport-aware normalization for deep-model ownership protection."""
from .autograd import Tensor, grad_check
from .data import Dataset, TriggerSet, blobs, make_trigger_set, patterns
from .errors import (
    DimensionError,
    FormatError,
    KeystoreError,
    PassnormError,
    SpecError,
    TrainingDiverged,
    UninitializedStatisticsError,
    UsageError,
)
from .models import (
    BranchParams,
    Model,
    ModelSpec,
    attach_branch,
    build_model,
    export_deployment,
    extract_branch,
    forward,
    toy_cnn,
    toy_mlp,
)
from .normalization import AWARE, FREE, BranchMode, NormKind, PassportNormState
from .passport import PassportBundle, generate_passports
from .training import TrainConfig, evaluate, predictor, total_loss, train
from .verification import VerificationReport, blackbox_verify, detect_signature, fidelity_verify

__version__ = "0.1.0"
