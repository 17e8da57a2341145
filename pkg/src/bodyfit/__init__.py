"""bodyfit: fast parametric body-model fitting and its decoding companions.

Library layout:

- body_model: model definition, file format, toy generator, kinematics,
  exact shape/translation Jacobian
- rotation_fitting: weighted Kabsch covariances and SO(3) projection
- shape_solver: ridge-regularized least squares for (beta, t)
- fitter: the alternating fitting algorithm and its variants
- heatmap_decode: soft-argmax decoding, uncertainty pooling, camera fusion,
  pointwise losses
- gps_encoding: FEM Laplacian eigenbasis and global point signatures
- interior_deform: precomputed-weight deformation of interior points
- metrics: MPJPE/MVE, Procrustes alignment, rotation angles
- cli: batch command-line front end (`bodyfit --help`)
"""

from .body_model import (
    BodyModel,
    PoseParams,
    forward,
    load_model,
    make_toy_model,
    parent_relative_rotations,
    save_model,
    shape_jacobian,
    validate_model,
)
from .fitter import (
    FitConfig,
    FitResult,
    FitTarget,
    fit,
    fit_many,
    fit_shared_beta,
    fit_subset,
    stratified_vertex_subset,
    transfer_config,
)
from .heatmap_decode import (
    HeatmapStack,
    aggregate_uncertainty,
    euclidean_loss,
    fuse_to_camera,
    pointwise_losses,
    soft_argmax_2d,
    soft_argmax_3d,
)
from .gps_encoding import (
    TetEigenbasis,
    TetMesh,
    eigenbasis,
    fem_laplacian,
    fit_readout,
    fourier_features,
    gps,
    make_box_mesh,
)
from .interior_deform import InteriorWeightSet, deform_points, knn_idw_weights
from .metrics import geodesic_angle, mean_point_error, mpjpe, mve, procrustes_align
from .rotation_fitting import (
    CorrespondenceSet,
    pivot_anchored_covariance,
    project_to_so3,
    weighted_covariance,
)
from .shape_solver import ShapeSolveConfig, solve_beta_t

__version__ = "0.1.0"
