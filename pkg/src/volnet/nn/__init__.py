"""Layers, model configs, forward/backward passes and weight files."""

from .layers import (
    conv_backward, conv_forward, dense_backward, dense_forward, dropout_backward, dropout_forward,
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, sigmoid_backward, sigmoid_forward,
)
from .model import (
    BUILTIN, LayerSpec, Model, ModelConfig, config_c3d_transfer, config_from_name, config_scratch3d,
    config_tiny, config_vgg16_2d, flatten_size, frozen_names, init_params, model_backward, model_forward,
    param_shapes, propagate,
)
from .weights import read_tensors, weights_load, weights_save, write_tensors
