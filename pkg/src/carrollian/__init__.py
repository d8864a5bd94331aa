"""Numerical tools for Carrollian Lie algebroids."""

__version__ = "0.1.0"

from ._accel import backend_name
from .algebroid import (
    AlgebroidModel,
    DegenerateFrameError,
    InconsistentKernelError,
    ModelError,
    PreconditionError,
    Section,
    build_model,
    is_killing,
    is_stationary,
    quotient_metric,
    validate,
    verify_morphism,
)
from .connection import (
    ExprConnection,
    Infeasible,
    ZeroConnection,
    connect,
    curvature,
    make_carrollian,
    make_frame_parallel_carrollian,
    make_L_compatible,
    make_torsion_free_carrollian,
    minimal_direct_sum_connection,
    torsion,
)
from .distribution import IntegrationError, LeafParams, check_L_path, classify_leaf, leaf_census, singular_scan
from .dynamics import ForceSection, Trajectory, classify_initial, integrate_apath, particle_confinement
from .fields import Chart, FieldDomainError, ParseError, ScalarField, parse_field
from .modelfile import dump_model, load_model
from .presets import make_preset
