"""skelsplat: a differentiable renderer for skeletal figures built from
diffuse anisotropic Gaussian primitives.

Poses become per-limb Gaussian primitives; closed-form ray integrals turn
them into dense multi-channel feature images; exact reverse-mode gradients
flow back to joint positions, limb widths and appearance vectors.
"""

from .camera import (
    CameraModel,
    Distortion,
    Extrinsics,
    Intrinsics,
    distort,
    orbit_cameras,
    project_points,
    ray_grid,
    transform_pose,
    undistort,
)
from .errors import (
    ConvergenceError,
    DegenerateConfigurationError,
    DegenerateEdgeError,
    NumericError,
)
from .fit import FitConfig, FitReport, appearance_penalty, fit_pose, l1_image_loss
from .geometry import mahalanobis_sq, rotation_between, spd_inverse
from .grad import (
    SceneGradients,
    density_integral_mu_gradient,
    fd_gradient,
    gradient_check,
    quad_oracle,
    render_backward,
)
from .renderer import (
    FeatureImage,
    RenderParams,
    background_terms,
    density_integral,
    optimal_depth,
    pixel_weights,
    raster_coeff,
    render,
)
from .sceneio import (
    FimgError,
    SceneError,
    SceneFile,
    SceneInvariantError,
    SceneSchemaError,
    SceneSyntaxError,
    load_scene,
    parse_scene,
    ppm_preview,
    read_feature_image,
    read_pose2d,
    sample_pose2d_path,
    sample_scene_path,
    serialize_scene,
    write_feature_image,
)
from .skeleton import (
    Pose2D,
    PrimitiveSet,
    SkeletonTopology,
    compose_absolute_pose,
    pose_error,
    primitives_from_pose,
    root_depth,
)

__version__ = "0.1.0"
