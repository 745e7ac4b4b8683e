"""vesselkit: Hessian-based 3D vessel segmentation toolkit.

Classical multi-scale vesselness filtering, a trainable lightweight
Hessian-feature network with hand-written backpropagation, cohort
clustering by intensity histograms, segmentation metrics, and a CLI that
drives the semi-automatic annotation loop end to end.
"""

from .augment import AugmentParams, elastic_deform, random_gamma
from .cluster import (
    ClusterAssignment,
    DistanceMatrix,
    HistogramDescriptor,
    distance_matrix,
    histogram_distance,
    intensity_histogram,
    ward_cluster,
)
from .errors import (
    DegenerateInputError,
    FileFormatError,
    NumericError,
    ParameterError,
    ShapeError,
    TruncatedFileError,
    UndefinedMetricError,
    VesselkitError,
)
from .filters import FrangiParams, binarize, frangi_vesselness, otsu_threshold
from .hessian import (
    EigenTriple,
    HessianField,
    eig_field,
    eig_sym3,
    gaussian_smooth,
    hessian_field,
)
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    ahd,
    confusion,
    dsclog,
    evaluate_masks,
    mask_points,
    rate_metrics,
)
from .model import (
    Checkpoint,
    HessNetConfig,
    ParamStore,
    forward,
    init_params,
    layout,
    load_checkpoint,
    param_count,
    params_from_checkpoint,
    save_checkpoint,
)
from .nifti import read_mask, read_nifti, write_mask, write_nifti
from .phantom import PhantomSpec, Tube, make_phantom
from .train import (
    EpochRecord,
    LossParams,
    OptState,
    TrainConfig,
    TrainingDiverged,
    adamw_step,
    backward,
    cosine_warm_restarts_lr,
    exp_log_tversky_loss,
    sample_patches,
    train,
    tversky_index,
)
from .volume import BinaryMask, Volume, apply_mask, mask_and, z_normalize

__version__ = "0.1.0"
