"""Two-stage HTR flow estimator."""
from .config import DESK, ModelConfig
from .fields import FlowField, VelocityField, flow_to_velocity, temporal_linear_flows, velocity_to_flow
from .network import (CostVolumeSet, FeatureMap, FlowModel, GlobalOutput, RefineOutput, RefinerState)

__all__ = [
    "DESK", "ModelConfig", "FlowField", "VelocityField", "flow_to_velocity", "temporal_linear_flows",
    "velocity_to_flow", "CostVolumeSet", "FeatureMap", "FlowModel", "GlobalOutput", "RefineOutput",
    "RefinerState",
]
