"""Block-structured CNN training and pruning toolkit.

Residual blocks are scored by auxiliary gating modules, iteratively removed
by a voting rule over accumulated per-instance marks, and the survivors are
exported as a gate-free compact model with exact FLOPs/parameter accounting.
An optional soft-filter-pruning stage shrinks channels inside the surviving
blocks.
"""

from blockprune.netcore import (
    BlockSpec,
    BlockState,
    GateMask,
    GatedNetwork,
    LayerShape,
    NetworkSpec,
    build_network,
    cifar_resnet_spec,
    micro_spec,
)

__all__ = [
    "BlockSpec",
    "BlockState",
    "GateMask",
    "GatedNetwork",
    "LayerShape",
    "NetworkSpec",
    "build_network",
    "cifar_resnet_spec",
    "micro_spec",
]
