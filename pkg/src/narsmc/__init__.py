"""Delta-adjusted substantive-model-compatible multiple imputation.

Implements chained-equations imputation with outcome delta-adjustment
(NARFCS), its substantive-model-compatible variants (NAR-SMCFCS and
NAR-SMC-stack), g-computation estimators with Rubin and stacked-variance
pooling, and a seeded Monte Carlo study harness.
"""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    Dataset,
    Family,
    Measurement,
    MissingnessPattern,
    ModelFormula,
    Role,
    VariableSpec,
    classify_pattern,
    classify_patterns,
    load_dataset,
    save_dataset,
)
from .glm import GlmFit, fit  # noqa: F401
