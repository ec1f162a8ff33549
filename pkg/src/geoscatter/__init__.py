"""Geodesic scattering, lens data and tangency strata on model Riemannian domains."""

__version__ = "0.1.0"

from .errors import GeoScatterError  # noqa: F401
from .flow import FlowConfig, flow_for, integrate_to_boundary  # noqa: F401
from .models import MetricModel, PhaseState, SceneSpec, build_model  # noqa: F401
from .scattering import (  # noqa: F401
    BoundaryState,
    ScatterTable,
    sample_inward_grid,
    scatter_one,
    scattering_map,
    tau_involution,
    trap_test,
)
