"""Selective state space scan with structure-aware state fusion.

Library layout:
    tensor   array substrate, scan-order flattening, CSV I/O
    ssm      selective projection, ZOH discretization, scan, observation
    fusion   dilated depthwise state fusion + merged-kernel re-param
    oracle   L x L structured-matrix forms and structure checks
    model    toy hierarchical backbone, checkpoint/config I/O
    train    hand-derived gradients, fd checking, toy task, SGD, ERF maps
    bench    equivalence-gated timing reports
    cli      command-line front door (`statefusion ...`)
"""

from .fusion import FusionKernel, identity_kernel, merge_dilated_kernels, sasf_apply
from .model import BlockConfig, ModelConfig
from .oracle import (
    AttentionSeq,
    StructuredMatrix,
    check_structure,
    linear_attention_matrix,
    mamba_matrix,
    spatial_matrix,
)
from .ssm import DiscreteSeq, SsmParams, discretize, init_ssm_params, ssm_forward, zoh_discretize
from .tensor import flatten_scan_order, tensor, unflatten_scan_order

__version__ = "0.1.0"

__all__ = [
    "AttentionSeq",
    "BlockConfig",
    "DiscreteSeq",
    "FusionKernel",
    "ModelConfig",
    "SsmParams",
    "StructuredMatrix",
    "check_structure",
    "discretize",
    "flatten_scan_order",
    "identity_kernel",
    "init_ssm_params",
    "linear_attention_matrix",
    "mamba_matrix",
    "merge_dilated_kernels",
    "sasf_apply",
    "spatial_matrix",
    "ssm_forward",
    "tensor",
    "unflatten_scan_order",
    "zoh_discretize",
    "__version__",
]
