"""Coefficient fitting by sample-based divergence minimization.

The training objective is the negative average log density of the pushed
samples under the standard normal reference, minus the average log Jacobian
determinant. It decomposes into one term per component, so components are
fit independently. Gradients are analytic: all intermediate quantities are
polynomial or rectifier expressions with closed-form derivatives.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass

import numpy as np

from .triangular import (
    MapComponent,
    TriangularTransportMap,
    _gauss_legendre,
    _he_table,
)

__all__ = [
    "InitialCoefficients",
    "LineSearch",
    "OptimizerConfig",
    "FitDiagnostics",
    "NonFiniteObjectiveError",
    "objective",
    "objective_gradient",
    "fit_map",
    "minimize_lbfgs",
]

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class NonFiniteObjectiveError(RuntimeError):
    """The training objective evaluated to a non-finite value."""

    def __init__(self, message: str, sample_index: int | None = None):
        super().__init__(message)
        self.sample_index = sample_index


class InitialCoefficients(enum.Enum):
    ZEROS = "zeros"
    WARM_START = "warm_start"


class LineSearch(enum.Enum):
    BACKTRACKING = "backtracking"


@dataclass
class OptimizerConfig:
    max_iterations: int = 200
    gradient_tolerance: float = 1e-6
    initial_coefficients: InitialCoefficients = InitialCoefficients.ZEROS
    line_search: LineSearch = LineSearch.BACKTRACKING

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.gradient_tolerance <= 0:
            raise ValueError("gradient_tolerance must be > 0")


@dataclass
class FitDiagnostics:
    iterations: int
    final_objective: float
    final_gradient_norm: float
    converged: bool
    wall_time: float


class _ComponentProblem:
    """Objective and gradient of one component over a fixed sample block.

    Everything that does not depend on the coefficients (Hermite tables at
    the samples and at the quadrature nodes, prefix products) is computed
    once at construction, so each optimizer iteration is linear algebra.
    """

    def __init__(self, component: MapComponent, samples: np.ndarray):
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 2 or samples.shape[1] != component.input_dim:
            raise ValueError(
                f"samples must be 2-D with {component.input_dim} columns"
            )
        s = component._structure
        self.rectifier = component.rectifier
        self.n_samples = samples.shape[0]
        self.n_terms = len(component.index_set)
        self.off_pos = s.off_pos
        self.diag_pos = s.diag_pos
        prefix = s.prefix_products(samples)
        self.p_off = prefix[:, s.off_pos]
        xq = samples[:, -1]
        self.xq = xq
        if s.diag_pos.size:
            nodes, weights = _gauss_legendre(component.quadrature_points)
            self.weights = weights
            self.scale = 0.5 * xq
            grid = 0.5 * xq[:, None] * (nodes + 1.0)
            self.node_table = _he_table(grid, s.deg_last_max - 1)
            self.point_table = _he_table(xq, s.deg_last_max - 1)
            self.onehot = s.onehot
            self.p_diag = prefix[:, s.diag_pos] * s.alpha_last
            # d(diag derivative)/d(coefficient) at the sample points.
            self.pk = self.p_diag * (self.point_table @ s.onehot.T)
        else:
            self.p_diag = None

    def _push_forward(self, coeffs: np.ndarray):
        """Component values and diagonal derivatives at the samples."""
        values = self.p_off @ coeffs[self.off_pos] if self.off_pos.size else 0.0
        if self.p_diag is None:
            g0 = float(self.rectifier.apply(0.0))
            return values + g0 * self.xq, None, None, None
        contrib = (self.p_diag * coeffs[self.diag_pos]) @ self.onehot
        node_deriv = np.einsum("rd,rqd->rq", contrib, self.node_table)
        with np.errstate(over="ignore"):
            gvals = self.rectifier.apply(node_deriv)
        values = values + self.scale * (gvals @ self.weights)
        diag = self.pk @ coeffs[self.diag_pos]
        return values, diag, node_deriv, gvals

    def per_sample(self, coeffs: np.ndarray) -> np.ndarray:
        values, diag, _, _ = self._push_forward(coeffs)
        if diag is None:
            log_slope = float(self.rectifier.log_value(0.0))
        else:
            log_slope = self.rectifier.log_value(diag)
        return 0.5 * values**2 - log_slope + _HALF_LOG_2PI

    def value(self, coeffs: np.ndarray) -> float:
        with np.errstate(invalid="ignore"):
            terms = self.per_sample(coeffs)
        if not np.all(np.isfinite(terms)):
            return np.inf
        return float(terms.mean())

    def value_and_grad(self, coeffs: np.ndarray):
        values, diag, node_deriv, _ = self._push_forward(coeffs)
        grad = np.zeros(self.n_terms)
        if diag is None:
            obj = 0.5 * values**2 - float(self.rectifier.log_value(0.0)) + _HALF_LOG_2PI
            if not np.all(np.isfinite(obj)):
                return np.inf, grad
            if self.off_pos.size:
                grad[self.off_pos] = (values @ self.p_off) / self.n_samples
            return float(obj.mean()), grad
        with np.errstate(invalid="ignore"):
            obj = 0.5 * values**2 - self.rectifier.log_value(diag) + _HALF_LOG_2PI
        if not np.all(np.isfinite(obj)):
            return np.inf, grad
        if self.off_pos.size:
            grad[self.off_pos] = (values @ self.p_off) / self.n_samples
        weighted_slope = self.rectifier.derivative(node_deriv) * self.weights
        bucket = np.einsum("rq,rqd->rd", weighted_slope, self.node_table)
        per_term = bucket @ self.onehot.T
        push_term = ((values * self.scale)[:, None] * self.p_diag * per_term).mean(axis=0)
        logdet_term = (self.rectifier.dlog(diag)[:, None] * self.pk).mean(axis=0)
        grad[self.diag_pos] = push_term - logdet_term
        return float(obj.mean()), grad


def _component_problems(transport_map: TriangularTransportMap, samples: np.ndarray):
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] != transport_map.total_dim:
        raise ValueError(
            f"samples must be 2-D with {transport_map.total_dim} columns"
        )
    m = transport_map.fixed_prefix_dim
    return [
        _ComponentProblem(comp, samples[:, : m + k])
        for k, comp in enumerate(transport_map.components, start=1)
    ]


def objective(transport_map: TriangularTransportMap, samples) -> float:
    """Average negative reference log density of pushed samples minus log-det."""
    problems = _component_problems(transport_map, samples)
    total = np.zeros(np.asarray(samples).shape[0])
    for prob, comp in zip(problems, transport_map.components):
        with np.errstate(invalid="ignore"):
            total += prob.per_sample(comp.coefficients)
    if not np.all(np.isfinite(total)):
        bad = int(np.nonzero(~np.isfinite(total))[0][0])
        raise NonFiniteObjectiveError(
            f"objective is non-finite at sample index {bad}", sample_index=bad
        )
    return float(total.mean())


def objective_gradient(transport_map: TriangularTransportMap, samples) -> np.ndarray:
    """Gradient with respect to all coefficients, concatenated per component."""
    problems = _component_problems(transport_map, samples)
    blocks = []
    for prob, comp in zip(problems, transport_map.components):
        _, grad = prob.value_and_grad(comp.coefficients)
        blocks.append(grad)
    return np.concatenate(blocks) if blocks else np.zeros(0)


@dataclass
class _LbfgsResult:
    x: np.ndarray
    iterations: int
    objective: float
    gradient_sup_norm: float
    converged: bool
    objective_history: list


def minimize_lbfgs(
    value_and_grad,
    x0,
    max_iterations: int = 200,
    gradient_tolerance: float = 1e-6,
    memory: int = 10,
    armijo_c: float = 1e-4,
    backtrack_factor: float = 0.5,
    max_backtracks: int = 50,
) -> _LbfgsResult:
    """Limited-memory quasi-Newton descent with Armijo backtracking.

    Accepted steps always satisfy the sufficient-decrease condition, so the
    objective is non-increasing along the iterate sequence.
    """
    x = np.array(x0, dtype=float)
    f, g = value_and_grad(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteObjectiveError("objective is non-finite at the initial point")
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    history = [f]
    iterations = 0
    converged = False
    for _ in range(max_iterations):
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= gradient_tolerance:
            converged = True
            break
        direction = _two_loop(g, s_hist, y_hist, rho_hist)
        descent = float(direction @ g)
        if not np.isfinite(descent) or descent >= 0.0:
            direction = -g
            descent = -float(g @ g)
        step = 1.0
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + step * direction
            f_new, g_new = value_and_grad(x_new)
            if (
                np.isfinite(f_new)
                and np.all(np.isfinite(g_new))
                and f_new <= f + armijo_c * step * descent
            ):
                accepted = True
                break
            step *= backtrack_factor
        if not accepted:
            break
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        history.append(f)
        iterations += 1
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    if gnorm <= gradient_tolerance:
        converged = True
    return _LbfgsResult(x, iterations, f, gnorm, converged, history)


def _two_loop(g, s_hist, y_hist, rho_hist):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def fit_map(
    transport_map: TriangularTransportMap,
    samples,
    config: OptimizerConfig | None = None,
):
    """Fit every component independently; returns (fitted map, diagnostics)."""
    if config is None:
        config = OptimizerConfig()
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < 2:
        raise ValueError("need at least 2 samples to fit a map")
    start = time.perf_counter()
    problems = _component_problems(transport_map, samples)
    fitted_components = []
    iterations = 0
    final_objective = 0.0
    gradient_norms = []
    converged = True
    for prob, comp in zip(problems, transport_map.components):
        if config.initial_coefficients is InitialCoefficients.WARM_START:
            x0 = comp.coefficients.copy()
        else:
            x0 = np.zeros_like(comp.coefficients)
        result = minimize_lbfgs(
            prob.value_and_grad,
            x0,
            max_iterations=config.max_iterations,
            gradient_tolerance=config.gradient_tolerance,
        )
        fitted_components.append(comp.replace_coefficients(result.x))
        iterations += result.iterations
        final_objective += result.objective
        gradient_norms.append(result.gradient_sup_norm)
        converged = converged and result.converged
    fitted = TriangularTransportMap(
        fitted_components, transport_map.total_dim, transport_map.fixed_prefix_dim
    )
    diagnostics = FitDiagnostics(
        iterations=iterations,
        final_objective=final_objective,
        final_gradient_norm=max(gradient_norms) if gradient_norms else 0.0,
        converged=converged,
        wall_time=time.perf_counter() - start,
    )
    return fitted, diagnostics
