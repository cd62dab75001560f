"""wirelens: per-edge cost analysis for cell-based differentiable
architecture search, with numerically certified identities."""

from .autodiff import GraphError, ShapeError, Tape, Tensor, default_dtype, set_default_dtype
from .cells import (
    CANDIDATES,
    CellSpec,
    EdgeActivation,
    Network,
    NetworkSpec,
    Trace,
    build_general_cell,
    build_minimal_cell,
    build_modified_cell,
    build_simplified_cell,
)
from .cost import (
    CostRecord,
    CostStats,
    Decomposition,
    all_edge_costs,
    cell_cost_sum,
    decompose_output_cost,
    edge_cost,
    monte_carlo_cost,
    output_edge_costs,
    path_cost_term,
)
from .datasets import Dataset, load_cifar10_binary, split_dataset, synth_dataset
from .estimators import (
    Adam,
    ArchSample,
    ArchState,
    RelaxedSample,
    SGD,
    arch_grad,
    darts_weights,
    sample_discrete,
    sample_gumbel_softmax,
)
from .ops import NormConfig

__version__ = "0.1.0"
