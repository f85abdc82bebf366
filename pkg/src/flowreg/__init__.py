"""Deformable 3D image registration via cascaded, jointly optimized
affine and dense flow stages."""

from .grid import AffineTransform, FlowField, GridSpec, RegionBox, Volume
from .fields import (
    affine_to_flow,
    central_region,
    compose_affine_with_flow,
    compose_flows,
    histogram_match,
    resample_flow,
    trilinear_sample,
    valid_domain,
    warp_flow,
    warp_volume,
)
from .losses import (
    EntropyConfig,
    LossWeights,
    correlation_loss,
    covariance,
    determinant_loss,
    entropy_estimate,
    invertibility_loss,
    l2_loss,
    mutual_information_loss,
    orthogonality_loss,
    total_variation_loss,
)
from .autodiff import (
    GradientSet,
    ParameterSet,
    evaluate_with_gradients,
    gradient_check,
)
from .cascade import (
    CascadeSpec,
    RegistrationResult,
    StageSpec,
    register,
    register_bidirectional,
    run_cascade,
)
from .metrics import (
    LandmarkSet,
    SegmentationMask,
    endpoint_error,
    jacobian_stats,
    landmark_distance,
    seg_iou,
    warp_mask,
)
from .synth import (
    BSplineFieldSpec,
    PhantomSpec,
    make_pair,
    make_phantom,
    random_bspline_flow,
)

__version__ = "0.1.0"
