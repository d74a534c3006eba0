"""Shared behaviour of the parameter dataclasses."""
from __future__ import annotations

import dataclasses

import numpy as np

from .graphgrad import Tape


class ParamSet:
    """Mixin for dataclasses whose fields are all float64 arrays."""

    prefix = "params"

    def arrays(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def named_arrays(self):
        return {f"{self.prefix}.{k}": v for k, v in self.arrays().items()}

    @classmethod
    def from_arrays(cls, arrays):
        names = [f.name for f in dataclasses.fields(cls)]
        if any(k.startswith(cls.prefix + ".") for k in arrays):
            arrays = {k[len(cls.prefix) + 1:]: v for k, v in arrays.items() if k.startswith(cls.prefix + ".")}
        missing = [n for n in names if n not in arrays]
        if missing:
            raise KeyError(f"{cls.__name__}: missing arrays {missing}")
        return cls(**{n: np.array(arrays[n], dtype=np.float64) for n in names})

    def replace(self, arrays):
        return dataclasses.replace(self, **arrays)

    def copy(self):
        return self.replace({k: v.copy() for k, v in self.arrays().items()})

    def bind(self, ops):
        """Parameter handles for ``ops``: tape leaves, or the arrays themselves."""
        if isinstance(ops, Tape):
            return {k: ops.leaf(v) for k, v in self.arrays().items()}
        return self.arrays()

    def equals(self, other):
        a, b = self.arrays(), other.arrays()
        return a.keys() == b.keys() and all(
            a[k].shape == b[k].shape and np.array_equal(a[k], b[k]) for k in a)


def leaf_grads(bound, grads):
    """Map tape-leaf gradients back to parameter names."""
    return {name: grads[node] for name, node in bound.items()}
