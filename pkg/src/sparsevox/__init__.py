"""Sparse voxel feature pyramid with a sparse transformer occupancy head."""
from .config import ConfigError, PipelineConfig
from .core import DenseVolume, GridShape, SparseVoxelTensor, densify, read_scene, sparsify, write_scene
from .flops import FlopCounter, FlopsReport, count_flops
from .head import MaskPrediction, OccupancyGrid, assemble_occupancy, decode_queries, run_head
from .match import Assignment, hungarian_match, matching_cost, compute_losses
from .pipeline import run_pipeline
from .pyramid import FeaturePyramid, build_pyramid, fuse_scales, sparse_interp
from .spconv import ConvMode, ConvSpec, Rulebook, apply_conv, build_rulebook, conv

__all__ = [
    "ConfigError", "PipelineConfig", "DenseVolume", "GridShape", "SparseVoxelTensor",
    "densify", "read_scene", "sparsify", "write_scene", "FlopCounter", "FlopsReport",
    "count_flops", "MaskPrediction", "OccupancyGrid", "assemble_occupancy", "decode_queries",
    "run_head", "Assignment", "hungarian_match", "matching_cost", "compute_losses",
    "run_pipeline", "FeaturePyramid", "build_pyramid", "fuse_scales", "sparse_interp",
    "ConvMode", "ConvSpec", "Rulebook", "apply_conv", "build_rulebook", "conv",
]
