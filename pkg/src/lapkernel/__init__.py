"""Exact CNN-GP and CNTK kernels with FC, GAP and local-average-pooling readouts."""
from .arccos import C_SIGMA, Cov2, expect_relu_deriv_prod, expect_relu_prod
from .assembly import AssemblyInterrupted, KernelAssembler, KernelBlocks, PairComputationError
from .augmentation import (GroupElement, augmented_kernel, build_augmented_dataset, check_equivariance,
                           flip_group, flip_translation_group, hflip, translate, translation_group,
                           trivial_group)
from .dp import Family, KernelConfig, KernelEngine, compute_pair, dp_layer, sigma0
from .readout import Readout, lap_weights, readout_fc, readout_gap, readout_lap
from .regression import (DEFAULT_RIDGE, KernelMatrix, assemble_kernel_matrix, krr_fit, krr_predict,
                         read_kernel_matrix, verify_theorem1, write_kernel_matrix)
from .tensor_core import Padding, patch_trace, resolve_index, trace4

__version__ = "0.1.0"
