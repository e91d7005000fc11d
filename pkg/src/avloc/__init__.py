"""Self-supervised sound-source localization with hard-positive mining.

Desk-scale numpy implementation: synthetic audio-visual data, two-stream
affine-tanh encoders, cosine response maps with sigmoid pseudo-masks,
cross-modal neighbor mining, a contrastive objective over pooled
responses with exact handwritten gradients, and cIoU/AUC evaluation.
"""

from .attention import (
    DEFAULT_EPSILON,
    DEFAULT_TAU,
    PseudoMask,
    ResponseMap,
    masked_response,
    mean_response,
    pseudo_mask,
    response_map,
    response_map_grad,
    write_response_pgm,
)
from .encoders import (
    AudioFeature,
    EncoderConfig,
    EncoderParams,
    VisionFeature,
    encode_audio,
    encode_audio_grad,
    encode_vision,
    encode_vision_grad,
    init_params,
    load_params,
    save_params,
)
from .metrics import (
    EvalProtocol,
    EvalReport,
    ablate_k,
    binarize_map,
    compare_methods,
    evaluate,
    evaluate_features,
    iou,
)
from .mining import (
    MiningIndex,
    PooledVisionVector,
    build_index,
    load_index,
    mining_precision,
    pool_vision,
    random_index,
    save_index,
    similarity_scores,
    top_k,
)
from .objective import (
    BatchItem,
    NonFiniteError,
    ResponseBundle,
    loss_and_grad,
    loss_hp,
    loss_vanilla,
    negative_response,
    positive_responses,
)
from .synthdata import (
    FeatureSet,
    SamplePair,
    SynthConfig,
    generate,
    load_dataset,
    load_features,
    save_dataset,
    save_features,
)
from .trainer import (
    DivergenceError,
    TrainConfig,
    TrainLogRecord,
    desk_scale_configs,
    grad_check,
    mine_index,
    sgd_step,
    train_full,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"
