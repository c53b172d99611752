# Inductive biases, ViT and agent CNN builders
from app.nn.agent import AgentCNN, build_agent
from app.nn.layers import LayerTrace, fc_equals_1x1_conv, parameter_count
from app.nn.shared import SharedParameterStore, trainable_partition
from app.nn.vit import VisionTransformer, build_vit

__all__ = ["AgentCNN", "LayerTrace", "SharedParameterStore", "VisionTransformer", "build_agent", "build_vit",
           "fc_equals_1x1_conv", "parameter_count", "trainable_partition"]
