"""Minimal reverse-mode engine: fixed operator set, U-Net generator, Adam."""

from .ops import (
    concat_channels,
    concat_channels_backward,
    conv3d,
    conv3d_backward,
    leaky_relu,
    leaky_relu_backward,
    upsample3d,
    upsample3d_backward,
)
from .unet import (
    AdamState,
    UNetConfig,
    UNetParams,
    adam_step,
    init_params,
    load_checkpoint,
    pack_input,
    save_checkpoint,
    unet_backward,
    unet_forward,
)
