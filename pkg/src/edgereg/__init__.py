"""Unsupervised 3D registration networks with learnable edge kernels."""
from __future__ import annotations

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .conv_blocks import BlockConfig, DenseFusionBlock, DilatedBlock, InceptionBlock, ResidualBlock
from .data import DisplacementField, LabelVolume, Volume3D
from .edge_kernels import EdgeKernelBank, KernelSnapshot, edge_forward, init_edge_bank, pca_project
from .errors import (
    ArgumentError,
    CheckpointError,
    DataError,
    EdgeRegError,
    FormatError,
    NumericError,
    ShapeError,
    TruncationError,
)
from .losses import LossConfig, local_mi_loss, smoothness, total_loss
from .metrics import dice, folding_fraction, residual_image
from .nonrigid_net import NonRigidModelConfig, NonRigidRegNet, nonrigid_forward, receptive_field
from .pipeline import RegistrationResult, TrainConfig, evaluate, register, train
from .rigid_net import RigidModelConfig, RigidRegNet, count_parameters, rigid_forward
from .spatial_transform import (
    AffineTransform,
    affine_to_field,
    affine_warp,
    compose_affine,
    compose_fields,
    trilinear_warp,
    warp_labels,
)
from .uncertainty import UncertaintyResult, mc_predict, render_uncertainty
from .volume_io import PhantomPair, generate_phantom_pair, read_volume, write_volume

__version__ = "0.1.0"
