"""Partial weakly-supervised oriented object detection, at desk scale.

Library + CLI covering rotated-box Gaussian geometry, the orientation/scale
loss suite, Voronoi-watershed scale targets, GMM-EM pseudo-label filtering
and a deterministic teacher-student training loop on synthetic scenes.
"""

from .geometry import (
    Gaussian2,
    HBox,
    OrientedBox,
    bhattacharyya_coefficient,
    gwd_squared,
    normalize_angle,
    obb_to_gaussian,
    obb_to_hbox,
    obb_to_point,
    rotated_iou,
)
from .losses import (
    LossValue,
    PointTargets,
    SupervisedWeights,
    ViewTransform,
    angle_loss,
    bce_loss,
    focal_loss,
    gaussian_overlap_loss,
    iou_loss,
    smooth_l1,
    supervised_loss,
    total_loss,
    unsupervised_loss,
    watershed_scale_loss,
)
from .scale_targets import (
    MarkerSet,
    basin_extents,
    grid_voronoi,
    scale_targets_for_scene,
    watershed,
)
from .cpf import CpfResult, Gmm1D, dynamic_threshold, filter_pseudo_labels, fit_gmm
from .detector import DensePrediction, ToyDetector
from .simloop import (
    EmaState,
    Schedule,
    TrainingReport,
    assign_targets,
    augment,
    ema_update,
    symmetry_view,
    train,
)
from .scenes import (
    Dataset,
    GroundTruth,
    LabeledScene,
    SceneSpec,
    WeakAnnotation,
    build_dataset,
    derive_annotations,
    generate_scene,
    inject_noise,
    parse_dota_annotations,
)
from .evaluation import Detection, ap50, dataset_ap50, decode

__version__ = "0.1.0"
