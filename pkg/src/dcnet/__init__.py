"""Dual-encoder salient-object-detection network on plain numpy kernels,
with structural reparameterization for batched-GEMM inference."""

from .autograd import OptimizerConfig, Parameter, Tape, TrainingDiverged, Var
from .blocks import ASPP, BasicBlock, ResASPP2, ResASPP2Config, SideHead
from .network import DCNet, DCNetConfig, ForwardOutputs, build, train_loop, train_step
from .reparam import InferenceNet, MergeError, MergedConvPlan, merge_dual_encoder
from .tensor import ConvSpec

__all__ = [
    "ASPP", "BasicBlock", "ConvSpec", "DCNet", "DCNetConfig", "ForwardOutputs",
    "InferenceNet", "MergeError", "MergedConvPlan", "OptimizerConfig",
    "Parameter", "ResASPP2", "ResASPP2Config", "SideHead", "Tape",
    "TrainingDiverged", "Var", "build", "merge_dual_encoder", "train_loop",
    "train_step",
]

__version__ = "0.1.0"
