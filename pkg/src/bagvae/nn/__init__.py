from .tensor import Tensor, Tape, backward, no_grad
from .optim import AdamState, adam_step

__all__ = ["Tensor", "Tape", "backward", "no_grad", "AdamState", "adam_step"]
