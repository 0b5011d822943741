"""Layer-wise adaptive moments optimizer (LAMB).

One "layer" is one parameter tensor. For each tensor::

    m <- b1 m + (1 - b1) g
    v <- b2 v + (1 - b2) g^2
    u  = (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps) + wd * w
    r  = ||w|| / ||u||      (1 if either norm is zero; never clipped)
    w <- w - lr * r * u
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch


@dataclass(frozen=True)
class LambHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-6
    weight_decay: float = 1.0
    base_lr: float = 3e-4

    def __post_init__(self):
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")


@dataclass
class LambState:
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "LambState":
        return cls(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


class NonFiniteGradientError(FloatingPointError):
    pass


@torch.no_grad()
def lamb_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: LambState,
              hyper: LambHyper, lr: float, names: Sequence[str] | None = None,
              trust_ratio: bool = True) -> tuple[Sequence[torch.Tensor], LambState]:
    """Update ``params`` in place and advance ``state`` by one step.

    ``trust_ratio=False`` fixes r = 1, which reduces the rule to a bias-corrected
    adaptive-moment step with decoupled weight decay.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]

    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {_name(names, i)} "
                             f"shape {tuple(params[i].shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient in parameter {_name(names, i)}")

    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t

    for w, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        u = (m / bc1) / ((v / bc2).sqrt() + hyper.epsilon)
        if hyper.weight_decay:
            u.add_(w, alpha=hyper.weight_decay)
        r = 1.0
        if trust_ratio:
            w_norm = torch.linalg.vector_norm(w).item()
            u_norm = torch.linalg.vector_norm(u).item()
            if w_norm > 0.0 and u_norm > 0.0:
                r = w_norm / u_norm
        w.add_(u, alpha=-lr * r)
    return params, state


def _name(names: Sequence[str] | None, i: int) -> str:
    return names[i] if names is not None else f"#{i}"


class Lamb(torch.optim.Optimizer):
    """``torch.optim`` wrapper around :func:`lamb_step`.

    Only parameters that received a gradient are updated; all of them share
    one step counter.
    """

    def __init__(self, params: Iterable, hyper: LambHyper = LambHyper(), names: Sequence[str] | None = None):
        super().__init__(params, dict(lr=hyper.base_lr))
        self.hyper = hyper
        self._names = list(names) if names is not None else None
        self._lamb = LambState()

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        params = [p for group in self.param_groups for p in group["params"]]
        names = self._names or [f"#{i}" for i in range(len(params))]
        if not self._lamb.m:
            self._lamb = LambState.zeros_like(params)
        lr = self.param_groups[0]["lr"]

        active = [i for i, p in enumerate(params) if p.grad is not None]
        sub = LambState(self._lamb.step, [self._lamb.m[i] for i in active], [self._lamb.v[i] for i in active])
        lamb_step([params[i] for i in active], [params[i].grad for i in active], sub, self.hyper, lr,
                  names=[names[i] for i in active])
        self._lamb.step = sub.step
        return loss

    def state_dict(self):
        out = super().state_dict()
        out["lamb"] = {"step": self._lamb.step, "m": self._lamb.m, "v": self._lamb.v}
        return out

    def load_state_dict(self, state_dict):
        state_dict = dict(state_dict)
        lamb = state_dict.pop("lamb", None)
        super().load_state_dict(state_dict)
        if lamb is not None:
            self._lamb = LambState(lamb["step"], list(lamb["m"]), list(lamb["v"]))

