from abc    import ABC, abstractmethod
from typing import Dict, Iterator, Tuple, Type

import numpy as np

from cellini.csunet.tensor import Parameter, Tensor
from cellini.csunet.utils  import DuplicateParameter, ShapeError, UnknownBlock


class Module(ABC):
    """
    Main abstract class of every network part.

    Assigning a `Parameter` or another `Module` as an attribute registers it, so
    parameter names follow the attribute path (e.g. `en1.sipu.conv_in.conv.weight`).
    """

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> "Module":
        setattr(self, name, module)
        return module

    @abstractmethod
    def forward(self, x: Tensor) -> Tensor:
        """forward
        differentiable forward pass of the module.
        """

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        return iter(self._children.items())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        """ every parameter (trainable or not) in registration order """
        for name, parameter in self._parameters.items():
            yield f"{prefix}{name}", parameter
        for name, child in self.children():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> Iterator[Parameter]:
        for _, parameter in self.named_parameters():
            if parameter.requires_grad:
                yield parameter

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for parameter in self.parameters():
            parameter.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: parameter.data.copy() for name, parameter in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        registry = dict(self.named_parameters())
        missing = set(registry) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, parameter in registry.items():
            value = np.asarray(state[name])
            if value.shape != parameter.shape:
                raise ShapeError(f"parameter '{name}' has shape {parameter.shape}, state holds {value.shape}")
            parameter.data[...] = value


class ParameterRegistry(dict):

    """ParameterRegistry

    Ordered name → Parameter mapping of a network. Names are unique; the order is
    the registration order and defines checkpoint layout.
    """

    def add(self, name: str, parameter: Parameter):
        if not isinstance(parameter, Parameter):
            raise TypeError(f"Registry accepts only `Parameter`s, but {type(parameter)} given for '{name}'")
        if name in self:
            raise DuplicateParameter(f"Parameter name '{name}' is already registered")
        parameter.name = name
        self[name] = parameter

    @classmethod
    def from_module(cls, module: Module) -> "ParameterRegistry":
        registry = cls()
        for name, parameter in module.named_parameters():
            registry.add(name, parameter)
        return registry

    def trainable(self) -> Iterator[Parameter]:
        for parameter in self.values():
            if parameter.requires_grad:
                yield parameter


class BlockRegistry(dict):

    """BlockRegistry

    A global registry of block classes keyed by their `kind`. Subclasses of
    `Block` register themselves on definition.
    """

    def add(self, kind: str, block: Type["Block"]):
        if not (isinstance(block, type) and issubclass(block, Block)):
            raise TypeError(f"Registry accepts only subclasses of `Block`, but {block} given")
        if kind in self and self[kind] is not block:
            raise ValueError(f"Block kind '{kind}' is already registered by {self[kind].__name__}")
        self[kind] = block

    def get_block(self, kind: str) -> Type["Block"]:
        kind = getattr(kind, "value", kind)
        if kind not in self:
            raise UnknownBlock(f"Block '{kind}' is not included in Registry")
        return self[kind]


blocks = BlockRegistry()


class Block(Module):
    """
    A network building block. `kind` names it in the block registry and
    `has_residual` exposes its composition for introspection.
    """

    kind: str = ""
    has_residual: bool = False

    def __init_subclass__(cls, kind: str = "", **kwargs):
        super().__init_subclass__(**kwargs)
        if kind:
            cls.kind = kind
            blocks.add(kind, cls)
