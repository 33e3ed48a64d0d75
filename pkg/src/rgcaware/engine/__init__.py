"""Minimal deterministic neural engine: atrous convolutions and friends."""
from .dilation import (DilationSchedule, fixed_schedule, gridding_coverage, gridding_coverage_1d,
                       influence_map, make_schedule, receptive_field, round_half_away)
from .layers import ShapeError, atrous_conv_backward, atrous_conv_forward, softmax
from .network import (LayerSpec, Network, NetworkSpec, count_parameters, load_network, save_network,
                      spec_by_name, toy_spec)

__all__ = [
    "DilationSchedule", "fixed_schedule", "gridding_coverage", "gridding_coverage_1d", "influence_map",
    "make_schedule", "receptive_field", "round_half_away", "ShapeError", "atrous_conv_backward",
    "atrous_conv_forward", "softmax", "LayerSpec", "Network", "NetworkSpec", "count_parameters",
    "load_network", "save_network", "spec_by_name", "toy_spec",
]
