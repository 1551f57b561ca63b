from __future__ import annotations

import numpy as np

from .diffmath import Dual, Var
from .diffmath import dual as dualops


class MLP:
    """Fully connected network over Dual inputs.

    `cond_dim` extra inputs are a per-batch vector (a frame code) shared by all
    points; their contribution is computed once per call and added to the
    value slice, which is exact because codes carry no spatial tangent. `skip`
    re-injects the input (and the code) before that hidden layer.
    """

    def __init__(self, in_dim: int, width: int, depth: int, out_dim: int, rng: np.random.Generator,
                 activation: str = "relu", beta: float = 100.0, cond_dim: int = 0,
                 skip: int | None = None, zero_last: bool = False, dtype=np.float64, name: str = "mlp"):
        self.activation = activation
        self.beta = beta
        self.skip = skip
        self.in_dim = in_dim
        self.cond_dim = cond_dim
        self.name = name
        self.layers: list[dict[str, Var]] = []
        fan_in = in_dim
        for i in range(depth + 1):
            last = i == depth
            fan_out = out_dim if last else width
            layer_in = fan_in + (in_dim if (skip is not None and i == skip) else 0)
            bound = 1.0 / np.sqrt(layer_in + cond_dim)
            layer = {}
            if last and zero_last:
                layer["w"] = np.zeros((layer_in, fan_out))
                layer["b"] = np.zeros(fan_out)
            else:
                layer["w"] = rng.uniform(-bound, bound, (layer_in, fan_out))
                layer["b"] = rng.uniform(-bound, bound, fan_out)
            if cond_dim and (i == 0 or (skip is not None and i == skip)):
                layer["wc"] = rng.uniform(-bound, bound, (cond_dim, fan_out))
            self.layers.append({k: Var(v.astype(dtype), requires_grad=True, name=f"{name}.{i}.{k}")
                                for k, v in layer.items()})
            fan_in = fan_out

    def params(self) -> list[Var]:
        return [v for layer in self.layers for v in layer.values()]

    def named_params(self) -> dict[str, Var]:
        return {v.name: v for v in self.params()}

    def _act(self, h: Dual) -> Dual:
        if self.activation == "softplus":
            return h.softplus(self.beta)
        return h.relu()

    def __call__(self, x: Dual, cond: Var | None = None) -> Dual:
        h = x
        for i, layer in enumerate(self.layers):
            if self.skip is not None and i == self.skip:
                h = dualops.concat([h, x], axis=-1)
            h = h.dense(layer["w"], layer["b"])
            if "wc" in layer:
                h = h + (cond @ layer["wc"])
            if i < len(self.layers) - 1:
                h = self._act(h)
        return h
