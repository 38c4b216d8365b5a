"""Online test-time adaptation for feature-similarity retrieval.

A source-pretrained, batch-normalized feature extractor is adapted on the
fly, one query mini-batch at a time, by minimizing the entropy of softmax
probabilities over each query's top-k gallery cosine similarities, with an
L2 pull toward the source parameters. Only the BN affine parameters move;
running BN statistics stay frozen. Includes baselines, a synthetic
distribution-shift scenario generator, metrics, and an experiment harness.
"""

from .adaptation import (
    AdaptState,
    GalleryStore,
    SelectionStrategy,
    TempConfig,
    adapt_step,
    adaptation_objective,
    build_gallery,
    load_gallery,
    make_adapt_state,
    mean_reid_entropy,
    predict,
    reid_entropy,
    save_gallery,
    select_galleries,
    selection_probabilities,
    similarity_matrix,
    top1_identities,
)
from .autodiff import (
    AdamState,
    BnMode,
    BnState,
    Tensor,
    adam_step,
    batchnorm_forward,
    finite_difference_check,
    update_running_stats,
)
from .baselines import (
    BaselineKind,
    BaselineOptions,
    MethodRunner,
    bn_adapt_step,
    build_method,
    no_adapt_step,
    source_tent_step,
)
from .corruptions import (
    CorruptionKind,
    CorruptionSpec,
    apply_brightness,
    apply_gaussian_blur,
    apply_pixelate,
)
from .extractor import (
    ClassifierHead,
    ExtractorConfig,
    ImageInput,
    ParameterSet,
    PretrainConfig,
    VectorInput,
    build_extractor,
    cross_entropy_loss,
    extract_features,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    softmax_triplet_loss,
)
from .gradcheck import run_gradient_suite
from .harness import RunConfig, RunResult, dump_features, run_experiment, sweep
from .metrics import MetricsRecord, cmc_top1, ema_series, phase_average, summarize
from .scenario import (
    ScenarioSpec,
    SyntheticWorld,
    WorldConfig,
    build_stream,
    generate_world,
    load_scenario,
    make_corruption_stream,
    make_location_change_stream,
    save_scenario,
    source_training_set,
)

__version__ = "0.1.0"
