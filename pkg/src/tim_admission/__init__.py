"""User admission control for topological interference management on the fixed-rank manifold."""

from .admission import (
    AdmissionConfig,
    AdmissionResult,
    InconsistencyError,
    StageError,
    bisection_admit,
    design_transceivers,
    exhaustive_oracle,
    feasibility_check,
    induce_sparsity,
    orthogonal_baseline,
    run_pipeline,
    scan_admit,
)
from .harness import ExperimentSpec, gen_topology, read_topology, run_sweep, write_topology
from .manifold import FactoredPoint, ManifoldShape, TangentVector
from .objectives import (
    CompletionProblem,
    NetworkTopology,
    ObservationMask,
    SmoothedL1Params,
    SparsityProblem,
)
from .trust_region import NumericalFailure, SolveReport, TrustRegionConfig, minimize

__version__ = "0.1.0"
