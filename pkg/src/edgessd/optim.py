"""Adam with bias-corrected moments and the staircase exponential LR schedule."""

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_arrays(self) -> dict:
        out = {}
        for name in sorted(self.m):
            out[f"adam.m/{name}"] = self.m[name]
            out[f"adam.v/{name}"] = self.v[name]
        return out

    def meta(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict) -> "AdamState":
        state = cls(meta["beta1"], meta["beta2"], meta["eps"], int(meta["t"]))
        for key, arr in arrays.items():
            kind, _, name = key.partition("/")
            if kind == "adam.m":
                state.m[name] = np.array(arr, dtype=np.float64)
            elif kind == "adam.v":
                state.v[name] = np.array(arr, dtype=np.float64)
        return state


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> None:
    """Update ``params`` in place.

    ``m = b1 m + (1 - b1) g``, ``v = b2 v + (1 - b2) g^2`` and
    ``theta -= lr * m_hat / (sqrt(v_hat) + eps)`` with the bias corrections
    taken at the global step count. Parameters without a gradient entry are
    left alone.

    Raises:
        NonFiniteGradient: before touching any state, if a gradient holds NaN/Inf.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r} at step {state.t + 1}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    initial: float = 1e-4
    decay: float = 0.95
    period: int = 1000

    def __post_init__(self):
        if self.initial <= 0:
            raise ValueError(f"initial learning rate must be positive, got {self.initial}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay rate must be in (0, 1], got {self.decay}")
        if self.period < 1:
            raise ValueError(f"period must be >= 1, got {self.period}")


def lr_at(schedule: LrSchedule, t: int) -> float:
    """``initial * decay ** floor(t / period)``."""
    if t < 0:
        raise ValueError(f"step must be >= 0, got {t}")
    return schedule.initial * schedule.decay ** (t // schedule.period)

