"""gridforge: a distributed cartesian cell-refinable grid.

Cells carry globally unique integer ids; the grid graph lives in a replicated
id -> owner hash table with explicit per-cell arrow lists; runtime refinement
keeps a 2:1 level balance; partitioning is pluggable (block, random, RCB,
Hilbert curve) and remote-neighbor copies refresh through precomputed
point-to-point transfer plans, synchronously or split-phase.
"""

from .amr import (
    BalanceError,
    FaceState,
    adapt_by_index,
    compute_refinement_index,
    default_prolong,
    default_restrict,
    refine_threshold,
    unrefine_threshold,
)
from .exchange import DataContract, ExchangeSizeError, ExchangeStateError, TransferPlan
from .geometry import Geometry, cell_bounding_box, cell_center, cell_size
from .mesh import Mesh, NotLocalError, UnknownCellError
from .partition import METHODS as PARTITION_METHODS
from .partition import compute_partition, hilbert_rank_order
from .topology import (
    INVALID_CELL,
    InvalidCellError,
    Topology,
    children_of,
    id_from,
    indices_of,
    level_of,
    level_start,
    parent_of,
    siblings_of,
    wrap_indices,
)
from .transport import (
    Comm,
    DeadlockError,
    Envelope,
    SerialComm,
    TransportError,
    decode_envelope,
    gather_to_root,
    run_ranks,
)

__version__ = "0.1.0"

__all__ = [
    "BalanceError",
    "Comm",
    "DataContract",
    "DeadlockError",
    "Envelope",
    "ExchangeSizeError",
    "ExchangeStateError",
    "FaceState",
    "Geometry",
    "INVALID_CELL",
    "InvalidCellError",
    "Mesh",
    "NotLocalError",
    "PARTITION_METHODS",
    "SerialComm",
    "Topology",
    "TransferPlan",
    "TransportError",
    "UnknownCellError",
    "adapt_by_index",
    "cell_bounding_box",
    "cell_center",
    "cell_size",
    "children_of",
    "compute_partition",
    "compute_refinement_index",
    "decode_envelope",
    "default_prolong",
    "default_restrict",
    "gather_to_root",
    "hilbert_rank_order",
    "id_from",
    "indices_of",
    "level_of",
    "level_start",
    "parent_of",
    "refine_threshold",
    "run_ranks",
    "siblings_of",
    "unrefine_threshold",
    "wrap_indices",
]
