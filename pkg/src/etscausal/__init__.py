"""Policy-evaluation toolkit: matched difference-in-differences treatment
effects on firm outcomes and stochastic-frontier efficiency effects, with a
synthetic-panel Monte Carlo harness for validation."""

__version__ = "0.1.0"

from .errors import ConfigError, EstimationError, EtsCausalError, PanelError
from .panel import (
    FirmYearRecord,
    FuelFactorTable,
    Panel,
    PhaseWindows,
    SummaryStats,
    compute_emissions,
    indexed_median_series,
    ingest_panel,
    log_change,
    summary_stats,
    trim_mid_fraction,
    write_panel,
)

__all__ = [
    "__version__",
    "ConfigError",
    "EstimationError",
    "EtsCausalError",
    "PanelError",
    "FirmYearRecord",
    "FuelFactorTable",
    "Panel",
    "PhaseWindows",
    "SummaryStats",
    "compute_emissions",
    "indexed_median_series",
    "ingest_panel",
    "log_change",
    "summary_stats",
    "trim_mid_fraction",
    "write_panel",
]
