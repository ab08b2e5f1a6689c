"""Neural hybrid recommender: GMF, MLP and side-feature scorers fused by weighted concatenation."""

from . import baselines  # noqa: F401  (registers baseline checkpoint kinds)
from .data import (
    FeatureSpec,
    FeatureTable,
    InteractionLog,
    SplitDataset,
    build_feature_table,
    compute_input_length,
    hash_text,
    leave_one_out_split,
    load_interactions,
    pad_or_truncate,
    prepare_feature,
)
from .evaluation import EvalReport, evaluate, hr_at_k, ndcg_at_k, rank_candidates
from .models import (
    AuxModel,
    FusedModel,
    GMFModel,
    MLPModel,
    build_model,
    fuse,
    load_checkpoint,
    save_checkpoint,
)
from .sampling import EvalCandidates, sample_epoch, sample_eval_candidates
from .training import TrainConfig, TrainReport, pretrain_all, search_fusion_weights, train

__version__ = "0.1.0"
