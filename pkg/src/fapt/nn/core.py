"""Parameter container and module tree with explicit forward/backward."""

from typing import Dict, Iterator, Tuple

import numpy as np


class ConfigError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Parameter:
    """A tensor plus its gradient buffer.

    Frozen parameters (``trainable=False``) never accumulate gradient; their
    ``grad`` stays identically zero.
    """

    __slots__ = ("value", "grad", "trainable", "adapter")

    def __init__(self, value: np.ndarray, trainable: bool = True, adapter: bool = False):
        self.value = value
        self.grad = np.zeros_like(value)
        self.trainable = trainable
        self.adapter = adapter

    def accumulate(self, g: np.ndarray) -> None:
        if self.trainable:
            self.grad += g

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size


class Module:
    """Minimal module tree: parameters, buffers and children registered by attribute."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = None
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if rest:
            self._children[head].set_buffer(rest, value)
        else:
            if head not in self._buffers:
                raise KeyError(dotted)
            object.__setattr__(self, head, value)

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True):
        for mod in self.modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0

    def freeze(self):
        for p in self.parameters():
            p.trainable = False
        return self

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters() if p.trainable or not trainable_only)

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.value for name, p in self.named_parameters()}

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)
