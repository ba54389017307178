from abc    import ABC, abstractmethod
from typing import Dict, Iterable, List

import numpy as np

from cellini.csunet.tensor import Parameter
from cellini.csunet.types  import AdamConfig, OptimizerConfig, SGDConfig
from cellini.csunet.utils  import ShapeError


class Optimizer(ABC):

    def __init__(self, params: Iterable[Parameter]):
        self.params: List[Parameter] = [p for p in params if p.requires_grad]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    @abstractmethod
    def step(self):
        """step
        update every parameter in place from its accumulated gradient.
        """

    @abstractmethod
    def state_dict(self) -> Dict:
        pass

    @abstractmethod
    def load_state_dict(self, state: Dict):
        pass

    def _check_slots(self, name: str, slots: List[np.ndarray]):
        if len(slots) != len(self.params):
            raise ShapeError(f"{name} state has {len(slots)} slots, expected {len(self.params)}")
        for slot, p in zip(slots, self.params):
            if slot.shape != p.shape:
                raise ShapeError(f"{name} slot shape {slot.shape} does not match parameter '{p.name}' {p.shape}")


class SGD(Optimizer):
    """ buf = momentum·buf + g ;  p −= lr·buf """

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-2, momentum: float = 0.9):
        super().__init__(params)
        self.lr, self.momentum = lr, momentum
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, buf in zip(self.params, self.buffers):
            buf *= self.momentum
            buf += p.grad
            p.data -= self.lr * buf

    def state_dict(self):
        return {"lr": self.lr, "momentum": self.momentum, "buffers": [b.copy() for b in self.buffers]}

    def load_state_dict(self, state):
        self._check_slots("SGD", state["buffers"])
        self.lr, self.momentum = float(state["lr"]), float(state["momentum"])
        self.buffers = [b.copy() for b in state["buffers"]]


class Adam(Optimizer):
    """ bias-corrected first and second moment estimates """

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self):
        return {"t": self.t, "lr": self.lr, "betas": (self.beta1, self.beta2), "eps": self.eps,
                "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state_dict(self, state):
        self._check_slots("Adam", state["m"])
        self._check_slots("Adam", state["v"])
        self.t = int(state["t"])
        self.lr, self.eps = float(state["lr"]), float(state["eps"])
        self.beta1, self.beta2 = (float(b) for b in state["betas"])
        self.m = [m.copy() for m in state["m"]]
        self.v = [v.copy() for v in state["v"]]


def make_optimizer(params: Iterable[Parameter], config: OptimizerConfig) -> Optimizer:
    if isinstance(config, SGDConfig):
        return SGD(params, lr=config.lr, momentum=config.momentum)
    if isinstance(config, AdamConfig):
        return Adam(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    raise ValueError(f"Unknown optimizer configuration {config!r}")
