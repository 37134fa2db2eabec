"""Tiny parameter-registry base for model components."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter


class Module:
    """Holds named parameters and child modules; names are dotted paths."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Module] = {}

    def register(self, name: str, data, trainable: bool = True) -> Parameter:
        p = Parameter(np.asarray(data, dtype=np.float64), name=name, trainable=trainable)
        self._params[name] = p
        return p

    def adopt(self, name: str, param: Parameter) -> Parameter:
        """Register an externally created parameter (e.g. a shared table)."""
        self._params[name] = param
        return param

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def parameters(self) -> dict[str, Parameter]:
        out = dict(self._params)
        for cname, child in self._children.items():
            for pname, p in child.parameters().items():
                out[f"{cname}.{pname}"] = p
        return out

    def parameter_list(self) -> list[Parameter]:
        return list(self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameter_list():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameter_list())
