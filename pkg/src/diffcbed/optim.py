"""Gradient evaluation of design objectives and Adam ascent on policy parameters.

Gradients come from torch reverse-mode autodiff in float64.  An objective is
any callable ``f(targets, states) -> scalar tensor`` where ``targets`` is the
straight-through target matrix (hard values forward, soft-path gradients)
and ``states`` is the ``(B, d)`` state tensor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np
import torch

from .policy import (
    PolicyParams,
    TemperatureSchedule,
    anneal_temperature,
    draw_perturbations,
    hard_targets,
    relax,
    straight_through,
)
from .scm import as_rng

log = logging.getLogger(__name__)


@dataclass
class EigEstimate:
    """Objective value (nats) with gradients w.r.t. the policy parameters."""

    value: float
    grad_target_logits: np.ndarray
    grad_state_values: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return bool(self.diagnostics.get("valid", True))

    @property
    def grad_norm(self) -> float:
        return float(np.sqrt(np.sum(self.grad_target_logits**2) + np.sum(self.grad_state_values**2)))


class Objective(Protocol):
    def __call__(self, targets: torch.Tensor, states: torch.Tensor) -> torch.Tensor: ...


def evaluate_with_gradients(objective: Objective, params: PolicyParams, perturbation) -> EigEstimate:
    """Value and exact gradients of ``objective`` averaged over frozen policy samples.

    Args:
        objective: callable on ``(targets, states)``; may expose a
            ``diagnostics`` dict attribute that is copied into the result.
        params: current policy parameters.
        perturbation: frozen Gumbel/logistic noise, ``(B, d)`` or ``(O, B, d)``.
    """
    pert = np.asarray(perturbation, dtype=float)
    if pert.ndim == 2:
        pert = pert[None]
    logits = torch.tensor(params.target_logits, requires_grad=True)
    states = torch.tensor(params.state_values, requires_grad=True)
    total = torch.zeros((), dtype=torch.float64)
    for o in range(pert.shape[0]):
        noise = torch.as_tensor(pert[o])
        soft = relax(logits, noise, params.mode, params.temperature, params.k)
        hard = torch.as_tensor(hard_targets(params.target_logits, pert[o], params.mode, params.k))
        total = total + objective(straight_through(soft, hard), states)
    value = total / pert.shape[0]
    diagnostics = dict(getattr(objective, "diagnostics", {}))
    if not torch.isfinite(value):
        diagnostics["valid"] = False
        shape = params.target_logits.shape
        return EigEstimate(float(value.detach()), np.full(shape, np.nan), np.full(shape, np.nan), diagnostics)
    value.backward()
    g_logits = logits.grad.numpy().copy()
    g_states = states.grad.numpy().copy()
    diagnostics["valid"] = bool(np.all(np.isfinite(g_logits)) and np.all(np.isfinite(g_states)))
    return EigEstimate(float(value.detach()), g_logits, g_states, diagnostics)


@dataclass
class OptimizerState:
    """Adam moments for the logits and states of one policy."""

    first_moment: tuple[np.ndarray, np.ndarray]
    second_moment: tuple[np.ndarray, np.ndarray]
    step_count: int = 0
    learning_rate: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: PolicyParams, learning_rate: float = 0.1, **kw) -> "OptimizerState":
        z = np.zeros_like(params.target_logits)
        return cls((z, z.copy()), (z.copy(), z.copy()), 0, learning_rate, **kw)


def adam_step(state: OptimizerState, params: PolicyParams, grads: tuple[np.ndarray, np.ndarray],
              design_range: Optional[tuple[float, float]] = None) -> tuple[PolicyParams, OptimizerState]:
    """One bias-corrected Adam ascent step on ``(target_logits, state_values)``.

    States are clipped to ``design_range`` afterwards when it is given.
    """
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m_new, v_new, updated = [], [], []
    for x, g, m, v in zip((params.target_logits, params.state_values), grads,
                          state.first_moment, state.second_moment):
        g = np.asarray(g, dtype=float)
        if g.shape != x.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {x.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        updated.append(x + state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        m_new.append(m)
        v_new.append(v)
    logits, states = updated
    if design_range is not None:
        states = np.clip(states, *design_range)
    new_params = params.copy(target_logits=logits, state_values=states)
    new_state = OptimizerState(tuple(m_new), tuple(v_new), t, state.learning_rate, b1, b2, state.epsilon)
    return new_params, new_state


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.1
    temperature: TemperatureSchedule = TemperatureSchedule()
    design_range: tuple[float, float] = (-10.0, 10.0)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


ObjectiveFactory = Callable[[np.random.Generator], Objective]


def optimize_policy(
    estimator: ObjectiveFactory,
    params: PolicyParams,
    C: int = 100,
    O: int = 16,
    config: Optional[OptimizerConfig] = None,
    rng=None,
    trace: Optional[list] = None,
) -> PolicyParams:
    """Run ``C`` Adam ascent steps on the policy.

    Args:
        estimator: builds a fresh objective from a random stream each step;
            all draws inside (outer particles, outcome noise) are shared by
            the ``O`` policy samples of that step.
        params: initial policy; its temperature is overwritten by the schedule.
        C: number of ascent steps.
        O: policy samples per step.
        config: learning rate, temperature schedule and state range.
        rng: random stream.
        trace: if given, receives one dict per step with keys
            ``step, eig_value, temperature, ess, grad_norm``.

    Returns:
        Final policy parameters.
    """
    if C < 1 or O < 1:
        raise ValueError("C and O must be >= 1")
    cfg = config or OptimizerConfig()
    rng = as_rng(rng)
    state = OptimizerState.zeros_like(params, cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2,
                                      epsilon=cfg.epsilon)
    params = params.copy()
    for c in range(C):
        params = params.copy(temperature=anneal_temperature(cfg.temperature, c, C))
        step_rng = np.random.default_rng(rng.integers(2**63))
        pert = draw_perturbations(params.mode, (O,) + params.target_logits.shape, step_rng)
        objective = estimator(step_rng)
        est = evaluate_with_gradients(objective, params, pert)
        if trace is not None:
            ess = est.diagnostics.get("ess")
            trace.append({
                "step": c,
                "eig_value": est.value,
                "temperature": params.temperature,
                "ess": None if ess is None else float(ess),
                "grad_norm": est.grad_norm if est.valid else None,
            })
        if not est.valid:
            log.warning("non-finite objective or gradient at step %d; update skipped", c)
            continue
        params, state = adam_step(state, params, (est.grad_target_logits, est.grad_state_values),
                                  cfg.design_range)
    return params.copy(temperature=anneal_temperature(cfg.temperature, C, C))


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar function, coordinate by coordinate."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


__all__ = [
    "EigEstimate",
    "OptimizerConfig",
    "OptimizerState",
    "adam_step",
    "evaluate_with_gradients",
    "finite_difference",
    "optimize_policy",
    "relative_error",
]

