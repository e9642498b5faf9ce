"""Multilayer perceptrons on top of the autodiff tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, DimensionError, NumericError
from .autodiff import Tensor, as_tensor, matmul, sigmoid, silu

ACTIVATIONS = {"silu": silu, "identity": lambda h: h}
OUTPUT_ACTIVATIONS = {None: None, "sigmoid": sigmoid}


@dataclass
class Mlp:
    """Dense network ``x -> W_L(act(... act(W_1 x + b_1)))+b_L``.

    Weights are stored as ``(fan_in, fan_out)`` so a batch ``(B, fan_in)``
    multiplies on the left.
    """

    sizes: tuple[int, ...]
    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "silu"
    out_activation: str | None = None
    check_finite: bool = field(default=True, repr=False)

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, activation: str = "silu",
             out_activation: str | None = None, zero_last: bool = False) -> Mlp:
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise DimensionError(f"bad layer sizes {sizes}")
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            weights.append(Tensor(w, requires_grad=True, name=f"w{i}"))
            biases.append(Tensor(np.zeros(fan_out), requires_grad=True, name=f"b{i}"))
        return cls(sizes, weights, biases, activation, out_activation)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def requires_grad_(self, flag: bool) -> Mlp:
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def copy(self, requires_grad: bool | None = None) -> Mlp:
        ws = [Tensor(w.data.copy(), w.requires_grad if requires_grad is None else requires_grad, w.name)
              for w in self.weights]
        bs = [Tensor(b.data.copy(), b.requires_grad if requires_grad is None else requires_grad, b.name)
              for b in self.biases]
        return Mlp(self.sizes, ws, bs, self.activation, self.out_activation)

    def __call__(self, x, detached: bool = False) -> Tensor:
        return forward(self, x, detached=detached)


def forward(params: Mlp, x, detached: bool = False) -> Tensor:
    """Apply the network to ``x`` of shape ``(..., in_dim)``.

    With ``detached`` the parameters enter as constants, so no gradient reaches
    them even when they require grad.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] != params.in_dim:
        raise DimensionError(f"input last dim {x.shape[-1:]} != {params.in_dim}")
    lead = x.shape[:-1]
    h = x.reshape(-1, params.in_dim) if x.ndim != 2 else x
    if params.activation not in ACTIVATIONS:
        raise ContractError(f"unknown activation {params.activation!r}")
    act = ACTIVATIONS[params.activation]
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if detached:
            w, b = Tensor(w.data), Tensor(b.data)
        h = matmul(h, w) + b
        if i < n - 1:
            h = act(h)
    out_act = OUTPUT_ACTIVATIONS[params.out_activation]
    if out_act is not None:
        h = out_act(h)
    if params.check_finite and not np.isfinite(h.data).all():
        raise NumericError("non-finite network output")
    return h if x.ndim == 2 else h.reshape(lead + (params.out_dim,))
