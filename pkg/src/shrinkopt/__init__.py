"""Instance-shrinking stochastic optimization toolkit.

Solvers and experiment drivers for L2-regularized linear SVM and strongly
convex finite sums: primal SGD with shrinking / importance-sampling batch
policies, dual coordinate descent with active-set shrinking, an empirical
O(1/k) convergence certifier for gradient-gated biased SGD, and the
Boss/Assistant producer-consumer training pipeline.
"""

__version__ = "0.1.0"

from .autoassist import (
    AssistantModel,
    PipelineConfig,
    run_async,
    run_interleaved,
    run_plain_loop,
)
from .dataio import (
    Dataset,
    SparseInstance,
    load_libsvm,
    parse_libsvm,
    synth_strongly_convex,
    synth_svm,
)
from .dual_cd import solve as dual_solve
from .linear_models import ComponentProblem, PrimalModel, svm_objective
from .primal_sgd import BatchPolicy, CostLedger, run_sgd
from .theorem_harness import TheoremRunConfig, bound_constant, run_certification

__all__ = [
    "__version__",
    "AssistantModel",
    "BatchPolicy",
    "ComponentProblem",
    "CostLedger",
    "Dataset",
    "PipelineConfig",
    "PrimalModel",
    "SparseInstance",
    "TheoremRunConfig",
    "bound_constant",
    "dual_solve",
    "load_libsvm",
    "parse_libsvm",
    "run_async",
    "run_certification",
    "run_interleaved",
    "run_plain_loop",
    "run_sgd",
    "svm_objective",
    "synth_strongly_convex",
    "synth_svm",
]
