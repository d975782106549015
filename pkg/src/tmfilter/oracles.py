"""Closed-form Gaussian references used by tests and the oracle-check command."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GaussianSpec",
    "gaussian_conditional",
    "kalman_update",
    "empirical_moments",
]


@dataclass(frozen=True)
class GaussianSpec:
    """Mean and covariance of a multivariate normal."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match mean")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric within 1e-12")
        eigs = np.linalg.eigvalsh(cov)
        # Allow exact singularity up to rounding (e.g. zero-noise limits),
        # reject genuinely indefinite matrices.
        if eigs.min() < -1e-12 * max(1.0, abs(eigs.max())):
            raise ValueError("covariance must be positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def gaussian_conditional(joint: GaussianSpec, observed_prefix) -> GaussianSpec:
    """Condition a joint Gaussian on its first block of coordinates."""
    y = np.atleast_1d(np.asarray(observed_prefix, dtype=float))
    m = y.size
    if m >= joint.dim:
        raise ValueError("observed prefix must be shorter than the joint dimension")
    mu_y, mu_x = joint.mean[:m], joint.mean[m:]
    s_yy = joint.covariance[:m, :m]
    s_xy = joint.covariance[m:, :m]
    s_xx = joint.covariance[m:, m:]
    try:
        gain = np.linalg.solve(s_yy, s_xy.T).T
    except np.linalg.LinAlgError as exc:
        raise ValueError("observed-block covariance is singular") from exc
    mean = mu_x + gain @ (y - mu_y)
    cov = s_xx - gain @ s_xy.T
    cov = 0.5 * (cov + cov.T)
    return GaussianSpec(mean, cov)


def kalman_update(
    prior: GaussianSpec, measurement_matrix, noise_cov, y
) -> GaussianSpec:
    """Standard Kalman posterior for a linear observation of a Gaussian prior."""
    h = np.atleast_2d(np.asarray(measurement_matrix, dtype=float))
    r = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    p = prior.covariance
    innovation_cov = h @ p @ h.T + r
    try:
        gain = np.linalg.solve(innovation_cov.T, (p @ h.T).T).T
    except np.linalg.LinAlgError as exc:
        raise ValueError("innovation covariance is singular") from exc
    mean = prior.mean + gain @ (y - h @ prior.mean)
    cov = p - gain @ h @ p
    cov = 0.5 * (cov + cov.T)
    return GaussianSpec(mean, cov)


def empirical_moments(samples) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased covariance (divisor N - 1)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    mean = samples.mean(axis=0)
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    return mean, cov
