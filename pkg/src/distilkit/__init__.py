"""distilkit: a configurable knowledge distillation toolkit.

Modules:
    autograd: reverse-mode automatic differentiation over numpy arrays.
    model: a pre-LN transformer encoder with feature taps and checkpoints.
    hooks: extraction and operation hooks, distances and loss composition.
    methods: the method catalog, combination and validation.
    orchestrator: stage loops, optimizer, teacher policies and chains.
    planner: teacher-student parallel planning and memory estimates.
    telemetry: distance records and correlation analysis.
    config, cli: run configuration and the command-line interface.
"""

from .errors import DistilError
from .methods import CATALOG, combine, get_descriptor, validate
from .model import ModelSpec, TransformerModel, count_params, get_spec

__version__ = "0.1.0"

__all__ = ["CATALOG", "DistilError", "ModelSpec", "TransformerModel", "combine", "count_params",
           "get_descriptor", "get_spec", "validate", "__version__"]
