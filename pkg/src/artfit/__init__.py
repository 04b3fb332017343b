"""Fit articulated 3D templates to 2D keypoints and curate noisy keypoint pseudo-labels."""

__version__ = "0.1.0"

from .fit import (  # noqa: E402
    DegenerateConfiguration,
    FitConfig,
    FitError,
    FitResult,
    KeypointObservation,
    PoseParams,
    fit_batch,
    fit_instance,
    fit_observation,
    grad,
    init_camera,
    loss_labeled,
    loss_pseudo,
)
from .geometry import (  # noqa: E402
    Articulation,
    PartTree,
    Similarity2D,
    StructureError,
    TemplateModel,
    WeakPerspectiveCamera,
    project,
)
