"""Langevin transition kernel shared by SGLD, DSGLD and CG-DSGLD.

theta_{t+1} = theta_t + (h_t / 2) * estimate + eta_t,   eta_t ~ N(0, h_t I)

There is no accept/reject step anywhere.
"""
import logging
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from utils.errors import ConfigError, NumericDivergenceError

logger = logging.getLogger(__name__)


class RandomStream:
    """Reproducible random stream keyed by (seed, stream_id).

    Uses the counter-based Philox generator so that every chain owns an
    independent stream and identical consumption reproduces identical draws.
    """

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        sequence = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self._generator = np.random.Generator(np.random.Philox(sequence))

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, stream_id={self.stream_id})"

    def integers(self, high, size=None):
        return self._generator.integers(0, high, size=size)

    def normal(self, size):
        return self._generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._generator.uniform(low, high, size=size)

    def beta(self, a, b, size=None):
        return self._generator.beta(a, b, size=size)

    def permutation(self, n):
        return self._generator.permutation(n)

    def categorical(self, probs):
        return int(self._generator.choice(len(probs), p=probs))


class ScheduleKind(str, Enum):
    CONSTANT = "Constant"
    POLY_DECAY = "PolyDecay"


@dataclass(frozen=True)
class StepSchedule:
    kind: ScheduleKind = ScheduleKind.CONSTANT
    h: float = 1e-4
    a: float = 1.0
    b: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'kind', ScheduleKind(self.kind))
        if self.kind is ScheduleKind.CONSTANT and not self.h > 0:
            raise ConfigError(f"constant step size must be > 0, got {self.h}")
        if self.kind is ScheduleKind.POLY_DECAY:
            if not self.a > 0 or self.b < 0:
                raise ConfigError(f"PolyDecay needs a > 0 and b >= 0, got a={self.a}, b={self.b}")
            if not 0.5 < self.gamma <= 1.0:
                raise ConfigError(f"PolyDecay needs 0.5 < gamma <= 1, got {self.gamma}")

    @classmethod
    def constant(cls, h):
        return cls(ScheduleKind.CONSTANT, h=h)

    @classmethod
    def poly_decay(cls, a, b, gamma):
        return cls(ScheduleKind.POLY_DECAY, a=a, b=b, gamma=gamma)

    def to_dict(self):
        if self.kind is ScheduleKind.CONSTANT:
            return {'kind': self.kind.value, 'h': self.h}
        return {'kind': self.kind.value, 'a': self.a, 'b': self.b, 'gamma': self.gamma}

    @classmethod
    def from_dict(cls, data):
        if ScheduleKind(data.get('kind', 'Constant')) is ScheduleKind.CONSTANT:
            return cls.constant(float(data['h']))
        return cls.poly_decay(float(data['a']), float(data.get('b', 1.0)), float(data.get('gamma', 1.0)))


def schedule_value(schedule: StepSchedule, t: int) -> float:
    """Step size h_t."""
    if schedule.kind is ScheduleKind.CONSTANT:
        return schedule.h
    base = schedule.b + t
    if base == 0:
        return float('inf')
    return schedule.a * base ** (-schedule.gamma)


@dataclass(frozen=True)
class ChainState:
    theta: np.ndarray
    t: int
    stream: RandomStream

    @classmethod
    def start(cls, theta, stream):
        return cls(np.array(theta, dtype=float), 0, stream)


def step(state: ChainState, estimate, schedule: StepSchedule, model=None) -> ChainState:
    """Advance the chain by one unconditional Langevin step."""
    vector = getattr(estimate, 'vector', estimate)
    vector = np.asarray(vector, dtype=float)
    if not np.all(np.isfinite(vector)):
        raise NumericDivergenceError(
            f"non-finite gradient estimate at step {state.t}: {vector} (theta={state.theta})")
    h = schedule_value(schedule, state.t)
    if not (np.isfinite(h) and h > 0):
        raise ConfigError(f"step size h_{state.t} = {h} is not a positive finite number")

    noise = np.sqrt(h) * state.stream.normal(state.theta.shape[0])
    theta = state.theta + 0.5 * h * vector + noise
    if model is not None:
        theta = model.clamp(theta)
    if not np.all(np.isfinite(theta)):
        raise NumericDivergenceError(f"chain diverged at step {state.t}: theta={theta}")
    return replace(state, theta=theta, t=state.t + 1)
