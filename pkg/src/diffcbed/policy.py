"""Design policies over intervention targets and states.

Targets are drawn from relaxed discrete distributions controlled by a
temperature: Gumbel-softmax for one target per experiment, Binary Concrete
for unconstrained multi-target sets and a Gumbel top-k relaxation for sets of
exactly ``k`` targets.  Forward evaluations always use the hard sample; the
relaxed sample carries the gradient (straight-through).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
import torch

from .scm import Design, as_rng

MODES = ("single", "multi_unconstrained", "multi_constrained")


@dataclass
class PolicyParams:
    target_logits: np.ndarray
    state_values: np.ndarray
    mode: str = "single"
    temperature: float = 1.0
    k: Optional[int] = None

    def __post_init__(self):
        self.target_logits = np.array(self.target_logits, dtype=float)
        self.state_values = np.array(self.state_values, dtype=float)
        if self.target_logits.ndim != 2 or self.target_logits.shape != self.state_values.shape:
            raise ValueError("target_logits and state_values must both be (B, d)")
        if self.mode not in MODES:
            raise ValueError(f"unknown policy mode {self.mode!r}")
        if self.mode == "multi_constrained":
            if self.k is None or not 1 <= self.k <= self.d:
                raise ValueError(f"constrained mode needs 1 <= k <= d, got k={self.k}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def B(self) -> int:
        return self.target_logits.shape[0]

    @property
    def d(self) -> int:
        return self.target_logits.shape[1]

    def copy(self, **changes) -> "PolicyParams":
        out = replace(self, **changes)
        if "target_logits" not in changes:
            out.target_logits = self.target_logits.copy()
        if "state_values" not in changes:
            out.state_values = self.state_values.copy()
        return out

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "k": self.k,
            "target_logits": self.target_logits.tolist(),
            "state_values": self.state_values.tolist(),
            "temperature": self.temperature,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PolicyParams":
        return cls(obj["target_logits"], obj["state_values"], obj["mode"], obj["temperature"], obj.get("k"))


def init_policy(B: int, d: int, mode: str, rng, design_range=(-10.0, 10.0), temperature: float = 5.0,
                k: Optional[int] = None) -> PolicyParams:
    """Uniform target logits and states drawn uniformly over the design range."""
    rng = as_rng(rng)
    lo, hi = design_range
    return PolicyParams(np.zeros((B, d)), rng.uniform(lo, hi, size=(B, d)), mode, temperature, k)


def draw_perturbations(mode: str, shape, rng) -> np.ndarray:
    """Gumbel noise for the softmax modes, logistic noise for Binary Concrete."""
    rng = as_rng(rng)
    if mode == "multi_unconstrained":
        return rng.logistic(size=shape)
    return rng.gumbel(size=shape)


def hard_targets(logits, perturbation, mode: str, k: Optional[int] = None) -> np.ndarray:
    keys = np.asarray(logits) + np.asarray(perturbation)
    if mode == "multi_unconstrained":
        return (keys > 0).astype(float)
    hard = np.zeros(keys.shape)
    if mode == "single":
        np.put_along_axis(hard, np.argmax(keys, axis=-1)[..., None], 1.0, axis=-1)
    else:
        top = np.argsort(-keys, axis=-1, kind="stable")[..., :k]
        np.put_along_axis(hard, top, 1.0, axis=-1)
    return hard


def relax(logits: torch.Tensor, perturbation: torch.Tensor, mode: str, temperature: float,
          k: Optional[int] = None) -> torch.Tensor:
    """Differentiable relaxed targets; broadcasts ``logits`` over leading sample dims."""
    keys = logits + perturbation
    if mode == "single":
        return torch.softmax(keys / temperature, dim=-1)
    if mode == "multi_unconstrained":
        return torch.sigmoid(keys / temperature)
    soft = torch.zeros_like(keys)
    alpha = keys
    for _ in range(k):
        p = torch.softmax(alpha / temperature, dim=-1)
        soft = soft + p
        alpha = alpha + torch.log(torch.clamp(1.0 - p, min=1e-30))
    return soft


class StraightThrough(torch.autograd.Function):
    """Returns ``hard`` in the forward pass and routes gradients to ``soft``."""

    @staticmethod
    def forward(ctx, soft, hard):
        return hard.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(soft: torch.Tensor, hard: torch.Tensor) -> torch.Tensor:
    return StraightThrough.apply(soft, hard)


@dataclass
class RelaxedDesignSample:
    """One (``(B, d)`` arrays) or ``O`` stacked (``(O, B, d)``) policy samples.

    ``perturbation`` freezes the sampling noise so the soft path can be
    recomputed from ``params`` for gradients.
    """

    soft_targets: np.ndarray
    hard_targets: np.ndarray
    states: np.ndarray
    perturbation: np.ndarray
    params: PolicyParams
    masked_states: np.ndarray = field(init=False)

    def __post_init__(self):
        self.masked_states = self.hard_targets * self.states

    @property
    def batched(self) -> bool:
        return self.hard_targets.ndim == 3

    def __getitem__(self, o: int) -> "RelaxedDesignSample":
        if not self.batched:
            raise IndexError("sample is not batched")
        return RelaxedDesignSample(
            self.soft_targets[o], self.hard_targets[o], self.states[o], self.perturbation[o], self.params
        )


def sample_relaxed(params: PolicyParams, rng, n_samples: Optional[int] = None) -> RelaxedDesignSample:
    """Draw relaxed/hard target samples (``n_samples`` stacked if given)."""
    shape = params.target_logits.shape if n_samples is None else (n_samples,) + params.target_logits.shape
    pert = draw_perturbations(params.mode, shape, rng)
    with torch.no_grad():
        soft = relax(torch.as_tensor(params.target_logits), torch.as_tensor(pert), params.mode,
                     params.temperature, params.k).numpy()
    hard = hard_targets(params.target_logits, pert, params.mode, params.k)
    states = np.broadcast_to(params.state_values, shape).copy()
    return RelaxedDesignSample(soft, hard, states, pert, params.copy())


def designs_from_arrays(hard, states, mode: Optional[str] = None) -> tuple[Design, ...]:
    hard = np.asarray(hard)
    states = np.asarray(states)
    out = []
    for row, srow in zip(hard, states):
        idx = np.flatnonzero(row > 0.5)
        if mode in ("single", "multi_constrained") and idx.size == 0:
            raise RuntimeError("empty target row in a mode that requires targets")
        out.append(Design(tuple(idx.tolist()), tuple(srow[idx].tolist())))
    return tuple(out)


def to_design_batch(sample: RelaxedDesignSample) -> tuple[Design, ...]:
    if sample.batched:
        raise ValueError("convert one sample at a time")
    return designs_from_arrays(sample.hard_targets, sample.states, sample.params.mode)


def mode_design(params: PolicyParams) -> tuple[Design, ...]:
    """Most probable targets (zero perturbation) paired with the current states."""
    hard = hard_targets(params.target_logits, np.zeros_like(params.target_logits), params.mode, params.k)
    return designs_from_arrays(hard, params.state_values, params.mode)


@dataclass(frozen=True)
class TemperatureSchedule:
    start: float = 5.0
    end: float = 0.5

    @classmethod
    def fixed(cls, value: float) -> "TemperatureSchedule":
        return cls(value, value)


def anneal_temperature(schedule: TemperatureSchedule, c: int, C: int) -> float:
    """Geometric interpolation from ``schedule.start`` (c=0) to ``schedule.end`` (c=C)."""
    if not 0 <= c <= C:
        raise ValueError(f"step {c} outside [0, {C}]")
    if C == 0 or schedule.start == schedule.end:
        return float(schedule.start)
    return float(schedule.start * (schedule.end / schedule.start) ** (c / C))


@dataclass(frozen=True)
class FixedState:
    value: float


@dataclass(frozen=True)
class UniformState:
    low: float
    high: float


StateRule = Union[FixedState, UniformState]


def random_baseline(mode: str, state_rule: StateRule, B: int, d: int, rng,
                    k: Optional[int] = None) -> tuple[Design, ...]:
    """Uniformly random targets over the mode's support with fixed or uniform states."""
    rng = as_rng(rng)
    hard = np.zeros((B, d))
    for b in range(B):
        if mode == "single":
            hard[b, rng.integers(d)] = 1.0
        elif mode == "multi_unconstrained":
            hard[b] = rng.random(d) < 0.5
        elif mode == "multi_constrained":
            hard[b, rng.choice(d, size=k, replace=False)] = 1.0
        else:
            raise ValueError(f"unknown policy mode {mode!r}")
    if isinstance(state_rule, FixedState):
        states = np.full((B, d), float(state_rule.value))
    else:
        states = rng.uniform(state_rule.low, state_rule.high, size=(B, d))
    return designs_from_arrays(hard, states, mode)
