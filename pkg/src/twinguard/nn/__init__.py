"""Small numpy layer set with explicit backward passes."""

from .layers import (
    DropoutMask,
    GruParams,
    LayerParams,
    affine,
    affine_backward,
    dilated_causal_conv,
    dilated_causal_conv_backward,
    dropout_mask,
    gru_step,
    gru_step_backward,
    mc_dropout_apply,
    relu,
    sigmoid,
    softmax,
    softmax_xent,
    spectral_normalize,
    spectral_normalize_backward,
    xavier_uniform,
)
from .optim import Adam, CosineAnnealingLR, ReduceLROnPlateau
