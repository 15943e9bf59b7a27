"""seqreg: two-stage NGF image registration with ROC evaluation tools."""

__version__ = "0.1.0"

from .evalstat import (
    DelongResult,
    HierarchyOutcome,
    MisalignmentSpec,
    apply_synthetic_misalignment,
    auroc,
    case_level_score,
    delong_test,
    dice,
    holm_bonferroni,
    run_hierarchical_plan,
)
from .phantom import PhantomCase, PhantomSpec, generate_phantom, generate_smooth_deformation
from .pipeline import (
    RegistrationConfig,
    RegistrationResult,
    apply_to_maps,
    register,
    register_deformable,
    register_rigid,
)
from .similarity import NgfConfig, ngf_evaluate
from .regularizer import curvature_evaluate
from .transform import (
    Deformation,
    DisplacementGrid,
    RigidParams,
    densify,
    folding_fraction,
    jacobian_determinant,
    warp,
    warp_mask,
)
from .volio import ScoreTable, read_metaimage, read_scores_csv, write_metaimage, write_scores_csv
from .volume import BinaryMask, Geometry, VectorField3D, Volume3D
