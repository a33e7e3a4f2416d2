"""Point-matched dual-branch diffusion for virtual try-on, at desk scale.

The package pairs a procedurally generated garment/person benchmark (with
exact ground-truth flow and point correspondences) with a small dual-branch
denoising diffusion model whose attention layers consume warped,
geometry-augmented semantic-point features.
"""

from .diffusion import (
    NoiseSchedule,
    add_noise,
    build_schedule,
    cfg_combine,
    denoise_step,
    diffusion_loss,
    point_focused_loss,
    sample,
    strided_schedule,
)
from .flow import (
    DisplacementField,
    apply_flow_to_points,
    make_affine_flow,
    make_smooth_flow,
    warp_image,
)
from .points import (
    PointMask,
    PointSet,
    build_point_mask,
    detect_interest_points,
    farthest_point_sample,
)
from .synthdata import GeneratorParams, Sample, generate_sample, generate_split

__version__ = "0.1.0"
