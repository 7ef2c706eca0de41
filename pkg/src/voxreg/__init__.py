"""voxreg: unsupervised deformable registration of 3D volumes in numpy.

The pipeline is a residual U-Net with a parallel dilated-convolution
bottleneck that maps a (fixed, moving) pair to a dense displacement field,
trained by minimizing local normalized cross-correlation plus a Sobolev
smoothness penalty.  Gradients come from a small tape-based reverse-mode
autodiff engine (:mod:`voxreg.tensor`).
"""

from .io import Checkpoint, VolumeIOError, load_checkpoint, load_field, load_labels, load_volume
from .io import save_checkpoint, save_field, save_labels, save_volume
from .loss import LossConfig, lncc, sobolev_norm, total_loss
from .metrics import MetricsReport, dice, evaluate_field, jacobian_determinant, jacobian_fnj
from .network import ArchConfig, NetworkParams, build_network, forward, param_count
from .synth import SynthPair, SynthSpec, make_dataset, make_pair
from .tensor import ShapeError, Tape, TapeError, Tensor, no_grad, recording
from .trainer import AdamState, NumericError, TrainConfig, adam_step, register, train
from .warp import sample_trilinear, warp_nearest, warp_trilinear

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "AdamState", "Checkpoint", "LossConfig", "MetricsReport", "NetworkParams",
    "NumericError", "ShapeError", "SynthPair", "SynthSpec", "Tape", "TapeError", "Tensor",
    "TrainConfig", "VolumeIOError", "adam_step", "build_network", "dice", "evaluate_field",
    "forward", "jacobian_determinant", "jacobian_fnj", "lncc", "load_checkpoint", "load_field",
    "load_labels", "load_volume", "make_dataset", "make_pair", "no_grad", "param_count",
    "recording", "register", "sample_trilinear", "save_checkpoint", "save_field", "save_labels",
    "save_volume", "sobolev_norm", "total_loss", "train", "warp_nearest", "warp_trilinear",
]
