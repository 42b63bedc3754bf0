"""In-model merging for CNNs.

Trains compact convolutional classifiers from scratch and, during a
finetuning phase, stochastically replaces kernels with convex blends of
themselves and similar kernels from the same layer - a weight-space
regularizer that costs nothing at inference.

Typical flow::

    from inmerge import (
        ArchConfig, MergeConfig, TrainConfig, run_protocol, synth_make,
    )

    data = synth_make("striped_textures", 1500, 4, 1, 28, 28, seed=7)
    arch = ArchConfig(input_shape=(1, 28, 28), num_classes=4, preset="tiny_cnn")
    cfg = TrainConfig(epochs_pretrain=20, epochs_inmerge=5, seed=7,
                      merge=MergeConfig(skip_layers=3, seed=7))
    result = run_protocol(arch, data, cfg)

The ``inmerge`` console script exposes the same machinery as the
``train`` / ``eval`` / ``analyze`` / ``ablate`` commands.
"""

from .checkpoint import load, save
from .data import (
    DatasetHandle,
    Split,
    apply_flip,
    augment_flip,
    batch_iter,
    load_dataset,
    normalize,
    save_dataset,
    synth_make,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    InmergeError,
    NumericError,
    ShapeError,
    UndefinedMetricError,
)
from .layers import (
    LayerSpec,
    conv2d_backward,
    conv2d_forward,
    conv_spec,
    dense_backward,
    dense_forward,
    dense_spec,
    flatten_spec,
    maxpool2d,
    maxpool2d_backward,
    pool_spec,
    relu,
    relu_backward,
    relu_spec,
    sigmoid_bce_loss,
    softmax_ce_loss,
)
from .merging import (
    MergeConfig,
    MergeReport,
    SimilarityStats,
    cosine_similarity,
    inmerge_sweep,
    merge_pair,
    similarity_stats,
    vectorize_kernel,
)
from .metrics import MetricBundle, accuracy, auroc, mean_auroc, roc_points
from .model import ArchConfig, Model, build_model, conv_layers
from .training import (
    EpochRecord,
    ProtocolResult,
    TrainConfig,
    TrainLog,
    evaluate,
    lr_at,
    resume_protocol,
    run_protocol,
    sgd_step,
    train_epoch,
)

__version__ = "0.1.0"
