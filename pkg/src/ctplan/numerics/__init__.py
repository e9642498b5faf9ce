from .autodiff import (Tensor, as_tensor, backward, clip, concat, exp, grad, grad_enabled, log,
                       matmul, no_grad, sigmoid, silu, square)
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import Mlp, forward
from .optim import Adam, AdamState, adam_step, cosine_lr, ema_update

__all__ = [
    "Tensor", "as_tensor", "backward", "clip", "concat", "exp", "grad", "grad_enabled", "log",
    "matmul", "no_grad", "sigmoid", "silu", "square", "load_checkpoint", "save_checkpoint",
    "Mlp", "forward", "Adam", "AdamState", "adam_step", "cosine_lr", "ema_update", "mlp_state", "mlp_from_state",
]


def mlp_state(net: Mlp, prefix: str = "") -> dict:
    return {prefix + k: v.data for k, v in net.named_parameters().items()}


def mlp_from_state(arrays: dict, sizes, prefix: str = "", activation: str = "silu",
                   out_activation: str | None = None) -> Mlp:
    n = len(sizes) - 1
    ws = [Tensor(arrays[f"{prefix}w{i}"].copy(), name=f"w{i}") for i in range(n)]
    bs = [Tensor(arrays[f"{prefix}b{i}"].copy(), name=f"b{i}") for i in range(n)]
    return Mlp(tuple(sizes), ws, bs, activation, out_activation)
