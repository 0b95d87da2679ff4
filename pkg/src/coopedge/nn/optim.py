from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore


@dataclass
class OptimizerState:
    algorithm: str = "adam"  # "sgd" | "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")


def optimizer_step(opt: OptimizerState, params: ParamStore, prefix: str = "") -> None:
    """Apply one update to every trainable parameter under ``prefix``, then zero grads.

    Raises if no trainable parameter has a gradient (step without backward).
    """
    trainable = [(n, t) for n, t in params.items(prefix) if t.requires_grad]
    if not any(t.grad is not None for _, t in trainable):
        raise RuntimeError("optimizer_step called with no populated gradients")
    opt.step_count += 1
    t_ = opt.step_count
    for name, p in trainable:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if opt.algorithm == "sgd":
            p.data = p.data - opt.lr * g
        else:
            m = opt.m.get(name)
            if m is None:
                m = opt.m[name] = np.zeros_like(p.data)
                opt.v[name] = np.zeros_like(p.data)
            v = opt.v[name]
            m *= opt.beta1
            m += (1.0 - opt.beta1) * g
            v *= opt.beta2
            v += (1.0 - opt.beta2) * g * g
            m_hat = m / (1.0 - opt.beta1**t_)
            v_hat = v / (1.0 - opt.beta2**t_)
            p.data = p.data - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
        p.grad = None
