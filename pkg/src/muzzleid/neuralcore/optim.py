"""Adam with a stepped learning-rate decay schedule."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import SpecError


@dataclass
class OptimizerState:
    learning_rate: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay_factor: float = 0.8
    decay_interval_epochs: int = 8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def scalars(self):
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "decay_factor": self.decay_factor,
            "decay_interval_epochs": self.decay_interval_epochs,
            "step_count": self.step_count,
        }

    @classmethod
    def from_scalars(cls, d):
        return cls(
            learning_rate=float(d["learning_rate"]),
            beta1=float(d["beta1"]),
            beta2=float(d["beta2"]),
            epsilon=float(d["epsilon"]),
            decay_factor=float(d["decay_factor"]),
            decay_interval_epochs=int(d["decay_interval_epochs"]),
            step_count=int(d["step_count"]),
        )


def adam_step(net, grads, opt):
    """Apply one bias-corrected Adam update to net's parameters in place."""
    params = net.parameters()
    if len(grads) != len(params):
        raise SpecError(f"got {len(grads)} gradients for {len(params)} tensors")
    if not opt.m:
        opt.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        opt.v = [np.zeros_like(p, dtype=np.float64) for p in params]
    opt.step_count += 1
    t = opt.step_count
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        if g.shape != p.shape:
            raise SpecError(f"gradient shape {g.shape} != parameter {p.shape}")
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        step = opt.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + opt.epsilon)
        p -= step.astype(p.dtype)


def maybe_decay(opt, completed_epochs):
    """Multiply the rate by decay_factor every decay_interval_epochs epochs."""
    if opt.decay_interval_epochs > 0 and completed_epochs > 0 \
            and completed_epochs % opt.decay_interval_epochs == 0:
        opt.learning_rate *= opt.decay_factor
        return True
    return False
