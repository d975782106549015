"""State-space models, time integration, and measurement-noise models.

The filter treats a model as three things: a propagation rule that leaves
the parameter block untouched, a deterministic observation operator, and an
additive measurement-noise distribution. The forced Duffing oscillator with
its stiffness and damping parameters appended to the state is the main
instance; a discrete linear-Gaussian model is provided for oracle checks.

Propagation and observation are vectorized over leading axes, so an entire
ensemble propagates in one call.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NoiseDistribution",
    "GaussianNoise",
    "LaplaceNoise",
    "StateSpaceModel",
    "DuffingParams",
    "DuffingModel",
    "LinearGaussianModel",
    "IntegrationError",
    "duffing_rhs",
    "rk4_step",
    "generate_truth_and_measurements",
    "make_initial_ensemble",
]


class IntegrationError(RuntimeError):
    """Time integration produced a non-finite state."""


class NoiseDistribution(ABC):
    """Additive measurement noise with i.i.d. coordinates."""

    dim: int

    @abstractmethod
    def sample(self, rng: np.random.Generator, size=()) -> np.ndarray:
        """Draw noise with shape ``size + (dim,)``."""

    @abstractmethod
    def log_pdf(self, w) -> np.ndarray:
        """Log density, summed over the coordinate axis."""


@dataclass(frozen=True)
class GaussianNoise(NoiseDistribution):
    std: float
    dim: int = 1

    def sample(self, rng, size=()):
        return rng.normal(0.0, self.std, tuple(np.atleast_1d(size)) + (self.dim,))

    def log_pdf(self, w):
        w = np.asarray(w, dtype=float)
        terms = -0.5 * (w / self.std) ** 2 - np.log(self.std * np.sqrt(2.0 * np.pi))
        return terms.sum(axis=-1)


@dataclass(frozen=True)
class LaplaceNoise(NoiseDistribution):
    """Zero-mean Laplace noise with density exp(-|x|/scale) / (2 scale)."""

    scale: float
    dim: int = 1

    def sample(self, rng, size=()):
        return rng.laplace(0.0, self.scale, tuple(np.atleast_1d(size)) + (self.dim,))

    def log_pdf(self, w):
        w = np.asarray(w, dtype=float)
        terms = -np.abs(w) / self.scale - np.log(2.0 * self.scale)
        return terms.sum(axis=-1)


class StateSpaceModel(ABC):
    """Propagation plus observation contract used by the filter.

    ``d_aug`` counts physical states and appended parameters together;
    ``propagate`` must leave the parameter block numerically unchanged and
    ``observe`` must be deterministic.
    """

    d_aug: int
    m: int
    noise: NoiseDistribution

    @abstractmethod
    def propagate(self, state: np.ndarray, t: float, dt: float) -> np.ndarray:
        ...

    @abstractmethod
    def observe(self, state: np.ndarray) -> np.ndarray:
        ...


@dataclass(frozen=True)
class DuffingParams:
    """Oscillator coefficients: x'' + delta x' + alpha x + beta x^3 = kappa cos(omega0 t)."""

    alpha: float
    delta: float
    beta: float
    kappa: float
    omega0: float

    def identified(self) -> np.ndarray:
        """The three coefficients the filter estimates."""
        return np.array([self.alpha, self.delta, self.beta])


def duffing_rhs(state, t: float, kappa: float, omega0: float) -> np.ndarray:
    """Time derivative of the augmented state (x, v, alpha, delta, beta).

    The parameter entries carry zero derivative so they stay constant under
    any integrator.
    """
    state = np.asarray(state, dtype=float)
    x, v = state[..., 0], state[..., 1]
    alpha, delta, beta = state[..., 2], state[..., 3], state[..., 4]
    accel = -delta * v - alpha * x - beta * x**3 + kappa * np.cos(omega0 * t)
    out = np.zeros_like(state)
    out[..., 0] = v
    out[..., 1] = accel
    return out


def rk4_step(rhs, state, t: float, dt: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta update."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    state = np.asarray(state, dtype=float)
    k1 = rhs(state, t)
    k2 = rhs(state + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = rhs(state + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = rhs(state + dt * k3, t + dt)
    out = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationError("integration produced a non-finite state")
    return out


class DuffingModel(StateSpaceModel):
    """Forced Duffing oscillator with (alpha, delta, beta) in the state.

    Only the position is observed. The forcing amplitude and frequency are
    treated as known inputs, not estimated.
    """

    d_aug = 5
    m = 1

    def __init__(self, kappa: float, omega0: float, noise: NoiseDistribution):
        self.kappa = kappa
        self.omega0 = omega0
        self.noise = noise

    def propagate(self, state, t, dt):
        return rk4_step(
            lambda s, tt: duffing_rhs(s, tt, self.kappa, self.omega0), state, t, dt
        )

    def observe(self, state):
        state = np.asarray(state, dtype=float)
        return state[..., :1]


class LinearGaussianModel(StateSpaceModel):
    """Scalar discrete-time linear system, mainly for oracle comparisons.

    One propagate call applies the transition factor once, regardless of dt,
    matching the discrete Kalman recursion it is checked against.
    """

    def __init__(self, transition: float, observation: float, noise: NoiseDistribution):
        self.transition = transition
        self.observation = observation
        self.noise = noise
        self.d_aug = 1
        self.m = 1

    def propagate(self, state, t, dt):
        out = np.asarray(state, dtype=float) * self.transition
        if not np.all(np.isfinite(out)):
            raise IntegrationError("integration produced a non-finite state")
        return out

    def observe(self, state):
        state = np.asarray(state, dtype=float)
        return self.observation * state[..., :1]


def generate_truth_and_measurements(
    params: DuffingParams,
    noise: NoiseDistribution,
    t_span: tuple[float, float],
    dt: float,
    initial_state: tuple[float, float],
    seed,
):
    """Integrate the true oscillator and emit a noisy position at every step.

    Returns (times, states, measurements): times has K+1 entries including
    the initial instant, states is (K+1, 5) with the constant parameters
    appended, measurements is (K, noise.dim) aligned with times[1:].
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    t0, t1 = float(t_span[0]), float(t_span[1])
    steps = int(round((t1 - t0) / dt))
    times = t0 + dt * np.arange(steps + 1)
    model = DuffingModel(params.kappa, params.omega0, noise)
    state = np.array(
        [initial_state[0], initial_state[1], params.alpha, params.delta, params.beta]
    )
    states = np.empty((steps + 1, 5))
    states[0] = state
    for k in range(steps):
        state = model.propagate(state, times[k], dt)
        states[k + 1] = state
    rng = np.random.default_rng(seed)
    measurements = states[1:, :1] + noise.sample(rng, (steps,))
    return times, states, measurements


def make_initial_ensemble(
    true_params: DuffingParams,
    n: int,
    spread: float,
    seed,
    multiplier: float = 2.0,
) -> np.ndarray:
    """Initial ensemble: states at rest, parameters centered off the truth.

    Parameter columns are Gaussian around ``multiplier`` times the true
    values with relative standard deviation ``spread``.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    if spread <= 0:
        raise ValueError("spread must be > 0")
    rng = np.random.default_rng(seed)
    center = multiplier * true_params.identified()
    ensemble = np.zeros((n, 5))
    for j, c in enumerate(center):
        ensemble[:, 2 + j] = rng.normal(c, spread * abs(c), n)
    return ensemble
