from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from .nn import OptimizerState, ParamStore, Tensor, optimizer_step

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def run_steps(params: ParamStore, prefix: str, step_loss: Callable[[int], Tensor], steps: int,
              opt: OptimizerState, label: str = "train", log_every: int = 500) -> list[float]:
    """Minimize ``step_loss(step)`` for ``steps`` updates; returns the loss trace.

    Only parameters under ``prefix`` that require grad are updated.
    """
    trace: list[float] = []
    for step in range(steps):
        params.zero_grad()
        loss = step_loss(step)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"{label}: loss became {value} at step {step}")
        loss.backward()
        optimizer_step(opt, params, prefix)
        trace.append(value)
        if log_every and (step + 1) % log_every == 0:
            log.info("%s step %d/%d loss %.4f", label, step + 1, steps, float(np.mean(trace[-log_every:])))
    return trace
