"""Variance-aware networks for temporal interval localization.

Diagonal-Gaussian moment propagation through pooling / linear / ReLU /
L2-normalization layers, a KL-based boundary regression loss, four network
variants (baseline, van_i, van_o, van_p) trained end-to-end on a synthetic
interval-localization benchmark, and an oracle suite that verifies the
analytic formulas by sampling and finite differences.
"""

from .moments import (
    GaussianScalar,
    MomentVector,
    WeightMatrix,
    VARIANCE_FLOOR,
    clamp_variance,
    elementwise_square,
    mean_var_of_window,
)
from .layers import PooledFeature, part_slices, vap_pool
from .losses import (
    LossBreakdown,
    RegressionTarget,
    classification_loss,
    combined_loss,
    kl_gaussian,
    kl_regression_loss,
)
from .network import (
    DetectionResult,
    NetworkConfig,
    NetworkParams,
    build,
    forward,
    backward,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .data import Dataset, Proposal, SynthConfig, SyntheticSequence, featurize, make_split
from .evaluate import Detection, average_precision, map_at_tious, nms, tiou
from .train import TrainConfig, cascade_infer, evaluate_dataset, train
from .oracle import fd_gradient, kl_numeric, mc_propagate, relu_exact_moments, run_verification

__version__ = "0.1.0"
