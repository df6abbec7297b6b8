"""hpnet: hierarchical predictive-learning networks on plain numpy."""

__version__ = "0.1.0"

from .errors import (
    ContractError,
    DimensionError,
    FormatError,
    GraphError,
    HPNetError,
    TrainingAbort,
)
from .tensor import Tensor, backward, grad_check, no_grad
from .conv import ConvKernel3D, conv3d, maxpool_spatial, sparse_conv3d, upsample_spatial
from .network import (
    HPNet,
    HPNetConfig,
    Scheme,
    frames_to_blocks,
    rollout_frames,
)
from .data import (
    MovementClass,
    Sequence,
    SequenceSpec,
    generate_sequence,
    make_dataset,
    read_dataset,
    write_dataset,
)
from .training import (
    AdamState,
    TrainConfig,
    TrainRecord,
    TrainState,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .metrics import (
    EvalReport,
    copy_last_baseline,
    decode_accuracy,
    evaluate_rollout,
    mse,
    mse_frames,
    ssim,
    ssim_frames,
)
from .neurophys import (
    run_familiarity_suppression,
    run_prediction_suppression,
    suppression_index,
)
