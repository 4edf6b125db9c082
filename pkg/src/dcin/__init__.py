"""Test-time color normalization and color-quality generalization tooling."""
from .colorspace import ChannelStats, channel_stats, lab_to_rgb, reinhard_transfer, rgb_to_lab
from .cqg_loss import (
    LossBreakdown,
    LossWeights,
    cqg_loss,
    cqg_loss_gradient,
    cross_entropy_loss,
    dice_loss,
    dice_score,
    mse_loss,
)
from .pipeline import Strategy, ensemble_predict, evaluate_dataset, normalize
from .reference_index import (
    ReferenceIndex,
    build_index,
    compute_histogram,
    histogram_distance,
    load_index,
    save_index,
    select_global_reference,
    select_local_reference,
)

__version__ = "0.1.0"
