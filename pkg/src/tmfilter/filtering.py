"""Sequential ensemble assimilation through triangular-map conditioning.

One assimilation step works on joint (measurement, state) samples: simulate
measurements for every propagated state, whiten the joint ensemble with its
empirical mean and Cholesky factor, fit a triangular map whose leading block
is the measurement, push the whitened pairs to the reference, then invert
the map with the whitened actual measurement substituted for the simulated
one. The back-transform reuses the same affine whitening, with the actual
measurement occupying the leading block.

Likelihood oversampling draws several simulated measurements per propagated
state; the extra rows sharpen the map fit while the posterior keeps one row
per ensemble member.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import seeding
from .dynamics import IntegrationError, StateSpaceModel
from .training import (
    FitDiagnostics,
    InitialCoefficients,
    NonFiniteObjectiveError,
    OptimizerConfig,
    fit_map,
)
from .triangular import (
    Rectifier,
    TriangularTransportMap,
    build_total_order_map,
    condition_inverse,
    evaluate_map,
)

__all__ = [
    "JointEnsemble",
    "NormalizationTransform",
    "FilterConfig",
    "AssimilationRecord",
    "DegenerateEnsembleError",
    "FilterDivergenceError",
    "simulate_likelihood",
    "normalize_ensemble",
    "denormalize",
    "assimilate",
    "run_filter",
]


class DegenerateEnsembleError(RuntimeError):
    """The joint ensemble cannot support a covariance factorization."""


class FilterDivergenceError(RuntimeError):
    """Propagation produced a non-finite ensemble state."""

    def __init__(self, step: int):
        super().__init__(f"filter diverged at step {step}: non-finite state")
        self.step = step


@dataclass
class JointEnsemble:
    """Paired simulated-measurement and state rows, grouped by member."""

    measurement_block: np.ndarray
    state_block: np.ndarray
    provenance: np.ndarray

    def __post_init__(self):
        if self.measurement_block.shape[0] != self.state_block.shape[0]:
            raise ValueError("measurement and state blocks must have equal rows")
        if self.provenance.shape[0] != self.state_block.shape[0]:
            raise ValueError("provenance must have one entry per row")


@dataclass
class NormalizationTransform:
    """Affine whitening built from the joint ensemble's first two moments."""

    mean: np.ndarray
    cholesky_factor: np.ndarray
    inverse_factor: np.ndarray

    @classmethod
    def from_samples(cls, samples: np.ndarray, jitter: float = 0.0):
        """Fit the whitening to sample rows.

        The covariance uses the unbiased (N - 1) convention. ``jitter`` is a
        relative diagonal inflation (times the mean variance) added before
        factorization; it keeps directions with collapsed spread close to
        constant in whitened space instead of amplifying rounding noise. If
        the factorization still fails the jitter is escalated once.
        """
        samples = np.asarray(samples, dtype=float)
        mean = samples.mean(axis=0)
        cov = np.atleast_2d(np.cov(samples, rowvar=False))
        scale = float(np.trace(cov)) / cov.shape[0]
        attempts = [jitter, 100.0 * jitter] if jitter > 0 else [0.0]
        factor = None
        for rel in attempts:
            try:
                factor = np.linalg.cholesky(cov + rel * scale * np.eye(cov.shape[0]))
                break
            except np.linalg.LinAlgError:
                continue
        if factor is None:
            raise DegenerateEnsembleError("degenerate ensemble")
        inverse = scipy.linalg.solve_triangular(
            factor, np.eye(cov.shape[0]), lower=True
        )
        return cls(mean=mean, cholesky_factor=factor, inverse_factor=inverse)

    def apply(self, rows: np.ndarray) -> np.ndarray:
        return (np.asarray(rows, dtype=float) - self.mean) @ self.inverse_factor.T

    def invert(self, rows: np.ndarray) -> np.ndarray:
        return np.asarray(rows, dtype=float) @ self.cholesky_factor.T + self.mean


@dataclass
class FilterConfig:
    ensemble_size: int
    oversampling_factor: int = 1
    map_order: int = 2
    rectifier: Rectifier = Rectifier.EXPONENTIAL
    quadrature_points: int = 32
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    covariance_jitter: float = 1e-10
    # Seeded noise (whitened units) added to the map-fit inputs only. It
    # bounds the sharpness a component can reach when ensemble coordinates
    # are exact functions of their predecessors, which otherwise makes the
    # fit objective unbounded below.
    fit_dither: float = 1e-6

    def __post_init__(self):
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be >= 2")
        if self.oversampling_factor < 1:
            raise ValueError("oversampling_factor must be >= 1")
        if self.covariance_jitter < 0:
            raise ValueError("covariance_jitter must be >= 0")
        if self.fit_dither < 0:
            raise ValueError("fit_dither must be >= 0")


@dataclass
class AssimilationRecord:
    step: int
    time: float
    posterior_states: np.ndarray
    map_fit: FitDiagnostics
    map_wall_time: float
    total_wall_time: float
    fitted_map: TriangularTransportMap | None = None


def simulate_likelihood(
    states: np.ndarray,
    model: StateSpaceModel,
    oversampling_factor: int,
    rng: np.random.Generator,
) -> JointEnsemble:
    """Draw simulated measurements for each state, replicated per state.

    Rows are grouped by member index, then by replicate, so the layout is
    deterministic and independent of execution order.
    """
    if oversampling_factor < 1:
        raise ValueError("oversampling factor must be >= 1")
    states = np.asarray(states, dtype=float)
    n = states.shape[0]
    predicted = model.observe(states)
    noise = model.noise.sample(rng, (n, oversampling_factor))
    measurements = (predicted[:, None, :] + noise).reshape(
        n * oversampling_factor, model.m
    )
    state_block = np.repeat(states, oversampling_factor, axis=0)
    provenance = np.repeat(np.arange(n), oversampling_factor)
    return JointEnsemble(measurements, state_block, provenance)


def normalize_ensemble(
    joint: JointEnsemble,
    actual_measurement,
    jitter: float = 1e-10,
):
    """Whiten the joint pairs; apply the same transform to the actual pairs.

    Returns (normalized_prior, normalized_actual_pairs, transform). The
    actual pairs place the real measurement in front of every state row, so
    their normalized leading block is shared by all rows.
    """
    pairs = np.concatenate([joint.measurement_block, joint.state_block], axis=1)
    if pairs.shape[0] < 2:
        raise ValueError("need at least 2 joint rows")
    transform = NormalizationTransform.from_samples(pairs, jitter=jitter)
    normalized_prior = transform.apply(pairs)
    actual = np.asarray(actual_measurement, dtype=float).reshape(1, -1)
    actual_pairs = np.concatenate(
        [np.tile(actual, (pairs.shape[0], 1)), joint.state_block], axis=1
    )
    normalized_actual = transform.apply(actual_pairs)
    return normalized_prior, normalized_actual, transform


def denormalize(
    transform: NormalizationTransform,
    normalized_measurement_prefix,
    conditioned_states: np.ndarray,
) -> np.ndarray:
    """Affine back-transform with the normalized measurement block in front."""
    prefix = np.asarray(normalized_measurement_prefix, dtype=float).reshape(-1)
    conditioned = np.atleast_2d(np.asarray(conditioned_states, dtype=float))
    if prefix.size + conditioned.shape[1] != transform.mean.size:
        raise ValueError("prefix plus state dimensions must match the transform")
    rows = np.concatenate(
        [np.tile(prefix, (conditioned.shape[0], 1)), conditioned], axis=1
    )
    return transform.invert(rows)


def _build_map(model: StateSpaceModel, config: FilterConfig) -> TriangularTransportMap:
    return build_total_order_map(
        total_dim=model.m + model.d_aug,
        fixed_prefix_dim=model.m,
        order=config.map_order,
        rectifier=config.rectifier,
        quadrature_points=config.quadrature_points,
    )


def assimilate(
    prior_states: np.ndarray,
    measurement,
    model: StateSpaceModel,
    config: FilterConfig,
    rng: np.random.Generator,
    warm_start_map: TriangularTransportMap | None = None,
    step: int = 0,
    time_point: float = 0.0,
):
    """One conditioning update of an already-propagated ensemble.

    Returns (posterior_states, record). With oversampling, all rows inform
    the map fit but only the first replicate of each member survives as the
    posterior ensemble, keeping the ensemble size constant.
    """
    start = time.perf_counter()
    prior_states = np.asarray(prior_states, dtype=float)
    if np.all(np.ptp(prior_states, axis=0) == 0.0):
        raise DegenerateEnsembleError("degenerate ensemble: all prior states identical")
    joint = simulate_likelihood(prior_states, model, config.oversampling_factor, rng)
    normalized_prior, normalized_actual, transform = normalize_ensemble(
        joint, measurement, jitter=config.covariance_jitter
    )
    if config.fit_dither > 0:
        training_rows = normalized_prior + config.fit_dither * rng.standard_normal(
            normalized_prior.shape
        )
    else:
        training_rows = normalized_prior
    base_map = warm_start_map if warm_start_map is not None else _build_map(model, config)
    map_start = time.perf_counter()
    try:
        fitted, fit_diag = fit_map(base_map, training_rows, config.optimizer)
    except NonFiniteObjectiveError:
        # A warm start can overflow on a new sample set; refit from zeros.
        fresh = _build_map(model, config)
        cold = OptimizerConfig(
            max_iterations=config.optimizer.max_iterations,
            gradient_tolerance=config.optimizer.gradient_tolerance,
            initial_coefficients=InitialCoefficients.ZEROS,
            line_search=config.optimizer.line_search,
        )
        fitted, fit_diag = fit_map(fresh, training_rows, cold)
    map_wall = time.perf_counter() - map_start
    reference = evaluate_map(fitted, normalized_prior)
    prefix = normalized_actual[0, : model.m]
    conditioned = condition_inverse(fitted, prefix, reference)
    posterior_pairs = denormalize(transform, prefix, conditioned)
    posterior_all = posterior_pairs[:, model.m :]
    keep = np.arange(prior_states.shape[0]) * config.oversampling_factor
    posterior = posterior_all[keep]
    record = AssimilationRecord(
        step=step,
        time=time_point,
        posterior_states=posterior,
        map_fit=fit_diag,
        map_wall_time=map_wall,
        total_wall_time=time.perf_counter() - start,
        fitted_map=fitted,
    )
    return posterior, record


def run_filter(
    model: StateSpaceModel,
    measurements,
    initial_ensemble: np.ndarray,
    config: FilterConfig,
    t0: float = 0.0,
) -> list[AssimilationRecord]:
    """Recursive propagate-then-condition loop over a measurement sequence.

    ``measurements`` is a sequence of (time, value) pairs with strictly
    increasing times. Each step derives its own random substream from the
    configured seed, so reruns and partial runs agree exactly.
    """
    states = np.asarray(initial_ensemble, dtype=float).copy()
    if states.shape[0] != config.ensemble_size:
        raise ValueError("initial ensemble row count must equal ensemble_size")
    records: list[AssimilationRecord] = []
    warm = None
    t_prev = t0
    for step, (t_k, y_k) in enumerate(measurements, start=1):
        if t_k <= t_prev:
            raise ValueError("measurement times must be strictly increasing")
        step_start = time.perf_counter()
        try:
            states = model.propagate(states, t_prev, t_k - t_prev)
        except IntegrationError as exc:
            raise FilterDivergenceError(step) from exc
        if not np.all(np.isfinite(states)):
            raise FilterDivergenceError(step)
        rng = seeding.substream(config.seed, seeding.DOMAIN_ASSIMILATION, step)
        use_warm = (
            warm
            if config.optimizer.initial_coefficients is InitialCoefficients.WARM_START
            else None
        )
        states, record = assimilate(
            states,
            y_k,
            model,
            config,
            rng,
            warm_start_map=use_warm,
            step=step,
            time_point=float(t_k),
        )
        record.total_wall_time = time.perf_counter() - step_start
        warm = record.fitted_map
        records.append(record)
        t_prev = t_k
    return records
