"""Adversarially trained joint classifier-discriminator for refining
generated images, plus the metrics harness that quantifies the gain."""

from .attacks import (
    AttackSpec,
    AttackTrace,
    ScheduleState,
    attack_generated,
    attack_real,
    early_stop_steps,
    project,
    schedule_steps,
    targeted_pgd,
)
from .booster import PROFILES, BoostConfig, boost_corpus, boost_pgd, boost_sgld, expand_profile
from .datapipe import (
    GENERATED,
    REAL,
    DataSources,
    ImageBatch,
    as_batches,
    load_container,
    load_generated,
    load_real,
    make_batch,
    toy_generator,
    verify_container,
    write_container,
)
from .errors import ConfigurationError, DataError, JointBoostError, NumericError
from .losses import (
    L0Reference,
    bce_loss,
    ce_loss,
    estimate_l0,
    inference_loss_v1,
    inference_loss_v2,
    inference_v2_objective,
    training_loss,
)
from .metrics import (
    FeatureSet,
    FlattenExtractor,
    MetricReport,
    TinyCnnExtractor,
    accuracy,
    extract_features,
    fid,
    inception_score,
    load_features,
    precision_recall,
    save_features,
    train_toy_extractor,
)
from .model import (
    ConstantBackbone,
    JointModel,
    LinearBackbone,
    ModelConfig,
    TinyConvBackbone,
    batch_to_tensor,
    build_model,
    class_probs,
    energy,
    real_prob,
    tensor_to_pixels,
)
from .trainer import TrainConfig, TrainState, init_state, train, train_step

__version__ = "0.1.0"
