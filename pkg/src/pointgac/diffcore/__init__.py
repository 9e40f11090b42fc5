from . import autograd, checkpoint
from .autograd import NonFiniteError, Tensor, no_grad
from .gradcheck import GradCheckReport, grad_check
from .transformer import attention_block, decoder_forward, encoder_forward, init_stack

__all__ = [
    "autograd",
    "checkpoint",
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "grad_check",
    "GradCheckReport",
    "attention_block",
    "encoder_forward",
    "decoder_forward",
    "init_stack",
]
