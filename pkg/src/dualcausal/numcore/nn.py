"""Parameters, modules and a few layers built on the tape."""

import numpy as np

from ..errors import ContractError
from .tensor import Tensor, matmul, relu


class Parameter(Tensor):
    """A trainable leaf tensor with a unique name inside its model."""

    def __init__(self, data, name, weight_decay_exempt=False):
        super().__init__(data, requires_grad=True, name=name)
        self.weight_decay_exempt = weight_decay_exempt


class Module:
    """Container that discovers parameters and sub-modules from attributes."""

    def named_parameters(self, prefix=""):
        seen = {}
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                seen[prefix + key] = val
            elif isinstance(val, Module):
                seen.update(val.named_parameters(prefix + key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        seen.update(item.named_parameters(f"{prefix}{key}.{i}."))
        return seen

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ContractError(f"state is missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data[...] = arr


def init_uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """``y = x @ W (+ b)`` with W stored as (in, out)."""

    def __init__(self, n_in, n_out, rng, bias=True, name="linear"):
        self.weight = Parameter(init_uniform(rng, n_in, (n_in, n_out)), f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out), f"{name}.bias", weight_decay_exempt=True) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Stack of linear layers with ReLU between them (none after the last)."""

    def __init__(self, sizes, rng, name="mlp"):
        self.layers = [Linear(a, b, rng, name=f"{name}.{i}") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = relu(layer(x))
        return self.layers[-1](x)
