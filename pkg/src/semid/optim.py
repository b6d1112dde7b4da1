"""AdamW and finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff
from .autodiff import Parameter, Tensor, backward, stop_gradient_replay
from .exceptions import ParameterError


class AdamW:
    """Adam with decoupled weight decay.

    Update per parameter, with bias-corrected moment estimates:

        m = b1*m + (1-b1)*g        v = b2*v + (1-b2)*g^2
        p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * p

    A parameter whose ``grad`` is None is treated as having a zero
    gradient (its moments still decay).
    """

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        if lr <= 0 or not np.isfinite(lr):
            raise ParameterError(f"learning rate must be positive, got {lr}")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ParameterError(f"betas must lie in [0, 1), got {betas}")
        if eps <= 0:
            raise ParameterError(f"eps must be positive, got {eps}")
        if weight_decay < 0:
            raise ParameterError(f"weight decay must be >= 0, got {weight_decay}")
        self.lr = float(lr)
        self.betas = (float(b1), float(b2))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self._state = {
            id(p): {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            for p in self.params
        }

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        b1, b2 = self.betas
        for p in self.params:
            state = self._state[id(p)]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            state["t"] += 1
            t = state["t"]
            state["m"] = b1 * state["m"] + (1.0 - b1) * g
            state["v"] = b2 * state["v"] + (1.0 - b2) * (g * g)
            m_hat = state["m"] / (1.0 - b1**t)
            v_hat = state["v"] / (1.0 - b2**t)
            p.data -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)

    def reset_rows(self, param: Parameter, rows: np.ndarray) -> None:
        """Clear first and second moments for the given rows (restarted codes)."""
        state = self._state[id(param)]
        state["m"][rows] = 0.0
        state["v"][rows] = 0.0


def check_gradients(
    build_loss: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    max_coords_per_param: int = 6,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``build_loss`` must rebuild the loss graph from the current
    parameter values on every call. Stop-gradient inputs recorded on the
    first build are replayed on the perturbed rebuilds, so the check
    validates the documented sg semantics rather than the full forward
    sensitivity. Returns the worst excess ratio

        |analytic - fd| / (atol + rtol * max(|analytic|, |fd|))

    over the sampled coordinates; values <= 1 mean every coordinate is
    within tolerance.
    """
    if h <= 0:
        raise ParameterError(f"step size must be positive, got {h}")
    rng = rng if rng is not None else np.random.default_rng(0)

    with stop_gradient_replay() as replay:
        for p in params:
            p.grad = None
        loss = build_loss()
        backward(loss)
        analytic = [
            p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
        ]

        worst = 0.0
        for p, full_grad in zip(params, analytic):
            n = p.data.size
            if n <= max_coords_per_param:
                coords = np.arange(n)
            else:
                coords = rng.choice(n, size=max_coords_per_param, replace=False)
            flat = p.data.reshape(-1)
            for c in coords:
                original = flat[c]
                flat[c] = original + h
                replay.rewind()
                plus = float(build_loss().data)
                flat[c] = original - h
                replay.rewind()
                minus = float(build_loss().data)
                flat[c] = original
                fd = (plus - minus) / (2.0 * h)
                an = float(full_grad.reshape(-1)[c])
                excess = abs(an - fd) / (atol + rtol * max(abs(an), abs(fd)))
                worst = max(worst, excess)
    return worst
