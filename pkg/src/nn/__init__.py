# Minimal dense-tensor engine used by every model
from .tensor import Parameter, Tensor, compute_gradients
from .layers import (DropoutMask, activate, apply_dropout_mask, concat, conv_text_forward, dropout,
                     fc_forward, gather_rows, l1_loss, l2_loss, max_pool, mse_loss)
from .optim import AdamState, adam_step
