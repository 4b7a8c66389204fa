"""Rough-path driven mean-field communities at desk scale.

Truncated signatures and variation metrics, level-2 rough differential
equations with measure-valued drift, Picard fixed points over empirical
path measures, and N-particle convergence experiments.
"""

__version__ = "0.1.0"

from . import tensor_core, path_metrics, drivers, rde_engine, mean_field, chaos_lab

__all__ = [
    "tensor_core",
    "path_metrics",
    "drivers",
    "rde_engine",
    "mean_field",
    "chaos_lab",
    "__version__",
]
