"""resdense: a dual-backbone fusion classifier for CT-scan series, trained
end to end on a small numpy autodiff engine."""

from .tensor import (
    Tape,
    Tensor,
    ShapeError,
    activation,
    add,
    affine,
    avg_pool2d,
    backward,
    batch_norm2d,
    concat_channels,
    conv2d,
    finite_diff_grad,
    gem_pool,
    global_avg_pool,
    read_ctf,
    relu,
    sigmoid,
    softmax,
    write_ctf,
)
from .blocks import (
    BackboneSpec,
    DenseBlock,
    DenseBlockSpec,
    DenseNetSpec,
    ResNetSpec,
    ResidualBlock,
    ResidualBlockSpec,
    ResidualStage,
    Transition,
)
from .model import (
    CheckpointError,
    ConfigError,
    ModelConfig,
    ResDenseModel,
    build_model,
    default_mini_config,
    fuse,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .data import (
    AugmentConfig,
    DataError,
    DatasetSplit,
    SeriesSample,
    SliceImage,
    augment,
    generate_synthetic_dataset,
    load_dataset,
    rescale_to_unit_range,
    resize_bilinear,
    rotate_image,
    split_train_val,
)
from .train import (
    Adam,
    FreezeMask,
    RMSprop,
    TrainConfig,
    TrainingDiverged,
    binary_cross_entropy,
    categorical_cross_entropy,
    fit,
    make_freeze_mask,
)
from .metrics import (
    MetricsReport,
    PredictionRecord,
    evaluate,
    f1_score,
    macro_f1,
    predict_series,
    report_from_records,
)

__version__ = "0.1.0"
