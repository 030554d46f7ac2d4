import numpy as np


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay.

    v <- momentum * v + (grad + weight_decay * p);  p <- p - lr * v
    """

    def __init__(self, named_params, lr=0.01, momentum=0.9, weight_decay=1e-4):
        self.params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def state_dict(self):
        return {
            "hyper": {"lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay},
            "velocity": dict(self.velocity),
        }

    def load_state_dict(self, state):
        missing = set(self.velocity) - set(state["velocity"])
        if missing:
            raise KeyError(f"optimizer state lacks buffers for {sorted(missing)}")
        for name in self.velocity:
            self.velocity[name] = np.array(state["velocity"][name],
                                           dtype=self.velocity[name].dtype)
