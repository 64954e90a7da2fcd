"""Superquadric recovery from point clouds with expectation, maximization and switching."""

from .bench import (
    BenchConfig,
    BenchReport,
    CorruptionSpec,
    SyntheticSpec,
    baseline_radial_lsq,
    error_metric,
    make_compound,
    random_superquadric,
    run_experiment,
    write_report,
)
from .ems import (
    FitConfig,
    FitResult,
    InsufficientPointsError,
    SwitchRecord,
    candidate_set,
    candidates_axis_mismatch,
    candidates_duality,
    ems_fit,
    initial_guess,
    m_step,
    s_step,
)
from .geometry import (
    Pose,
    Superquadric,
    SurfaceSamples,
    implicit_gradient,
    implicit_value,
    radial_distance,
    radial_project,
    sample_surface_equidistant,
    surface_area,
)
from .gum import (
    AllOutliersError,
    Correspondences,
    GumConfig,
    GumState,
    e_step,
    negative_log_likelihood,
    observed_nll,
    sigma2_update,
)
from .hier import (
    HierarchyError,
    HierConfig,
    StructureGraph,
    classify_outliers,
    euclidean_cluster,
    recover_hierarchy,
    recover_hierarchy_multi,
    recover_layer,
    segment_points,
)
from .io import ResultDocument, read_cloud, write_cloud

__version__ = "0.1.0"
