"""Small differentiable-computation toolkit on top of torch autograd.

Parameters live in ``torch.nn.Module`` objects; a *param store* is the ordered
``{name: tensor}`` mapping returned by :func:`param_store`. Optimisation uses
the hand-written :func:`adam_step` so every trainer in the package shares one
update rule.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch


class ContractError(ValueError):
    """Inputs do not satisfy an operation's shape or type contract."""


ParamStore = dict  # ordered name -> torch.Tensor


def param_store(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return dict(module.named_parameters())


def flatten(params: dict[str, torch.Tensor]) -> np.ndarray:
    if not params:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate(
        [p.detach().cpu().numpy().astype(np.float32, copy=False).ravel() for p in params.values()]
    )


def unflatten(vector: np.ndarray, like: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    vector = np.asarray(vector, dtype=np.float32)
    total = sum(p.numel() for p in like.values())
    if vector.size != total:
        raise ContractError(f"vector has {vector.size} entries, parameters need {total}")
    out, offset = {}, 0
    for name, p in like.items():
        chunk = vector[offset : offset + p.numel()].reshape(tuple(p.shape))
        out[name] = torch.from_numpy(chunk.copy())
        offset += p.numel()
    return out


def load_params(module: torch.nn.Module, params: dict[str, torch.Tensor]) -> None:
    own = param_store(module)
    if list(own) != list(params):
        raise ContractError("parameter names differ from the module layout")
    with torch.no_grad():
        for name, p in own.items():
            src = params[name]
            if tuple(src.shape) != tuple(p.shape):
                raise ContractError(f"{name}: shape {tuple(src.shape)} != {tuple(p.shape)}")
            p.copy_(src)


def _call(module, objective, inputs):
    try:
        return objective(module, *inputs) if objective is not None else module(*inputs)
    except RuntimeError as exc:
        if "shape" in str(exc) or "size" in str(exc):
            raise ContractError(str(exc)) from exc
        raise


def eval_with_grads(module: torch.nn.Module, *inputs, objective: Callable | None = None):
    """Evaluate ``objective(module, *inputs)`` (or ``module(*inputs)``) and its parameter gradients.

    For a tensor-valued output the gradients are those of its sum. Parameters
    that do not influence the output get zero gradients.
    """
    params = param_store(module)
    out = _call(module, objective, inputs)
    target = out if out.dim() == 0 else out.sum()
    grads = torch.autograd.grad(
        target, list(params.values()), allow_unused=True, retain_graph=False
    ) if target.requires_grad else [None] * len(params)
    grads = {
        n: (torch.zeros_like(p) if g is None else g.detach()) for (n, p), g in zip(params.items(), grads)
    }
    return out.detach(), grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _to_double(x):
    if isinstance(x, torch.Tensor) and x.is_floating_point():
        return x.double()
    if isinstance(x, (list, tuple)):
        return type(x)(_to_double(v) for v in x)
    return x


def finite_difference_check(
    module: torch.nn.Module, *inputs, objective: Callable | None = None, h: float = 1e-3
) -> float:
    """Worst elementwise relative error between autograd and central differences.

    The check runs on a float64 copy of the module so the difference quotient
    is not swamped by single-precision rounding.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    probe = copy.deepcopy(module).double()
    inputs = _to_double(inputs)
    out, grads = eval_with_grads(probe, *inputs, objective=objective)
    if out.dim() != 0:
        raise ContractError("finite-difference check needs a scalar loss")
    analytic, numeric = [], []
    with torch.no_grad():
        for name, p in param_store(probe).items():
            flat = p.view(-1)
            num = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = _call(probe, objective, inputs).item()
                flat[i] = orig - h
                f_minus = _call(probe, objective, inputs).item()
                flat[i] = orig
                num[i] = (f_plus - f_minus) / (2 * h)
            analytic.append(grads[name].reshape(-1).numpy())
            numeric.append(num.numpy())
    if not analytic:
        return 0.0
    return max_relative_error(np.concatenate(analytic), np.concatenate(numeric))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def snapshot(self) -> "AdamState":
        return AdamState(
            self.lr, self.beta1, self.beta2, self.eps, self.t,
            {k: x.clone() for k, x in self.m.items()},
            {k: x.clone() for k, x in self.v.items()},
        )


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState):
    """Bias-corrected Adam update applied in place; returns ``params``."""
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if tuple(g.shape) != tuple(p.shape):
                raise ContractError(f"{name}: gradient shape {tuple(g.shape)} != {tuple(p.shape)}")
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            if state.lr != 0.0:
                step = (m / c1) / ((v / c2).sqrt() + state.eps)
                p.sub_(state.lr * step)
    return params


def seeded(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) % (2**63))
    return gen


def init_module(factory: Callable[[], torch.nn.Module], seed: int) -> torch.nn.Module:
    """Build a module with parameter initialisation drawn from a private seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) % (2**63))
        return factory()
