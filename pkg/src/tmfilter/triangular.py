"""Lower-triangular monotone maps built from multivariate Hermite expansions.

Each map component depends on a growing prefix of the inputs and is strictly
increasing in its last input: the last-input derivative of the polynomial
part is passed through a positive rectifier and integrated from zero, so
monotonicity holds for every finite coefficient vector. That structure makes
the Jacobian determinant a product of positive diagonal terms and reduces
inversion to a sequence of scalar root-finding problems.

Evaluation routines accept a single point (1-D array) or a batch of points
(2-D array, one row per point) and vectorize over rows.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "Rectifier",
    "MultiIndexSet",
    "MapComponent",
    "TriangularTransportMap",
    "MapEvaluationError",
    "InversionError",
    "build_total_order_set",
    "build_total_order_map",
    "hermite_eval",
    "evaluate_f",
    "evaluate_component",
    "evaluate_map",
    "log_det_jacobian",
    "invert_last",
    "condition_inverse",
    "map_to_document",
    "map_from_document",
    "save_map",
    "load_map",
]

# Bisection stops at this bracket width, Newton polishing takes over.
_BISECTION_WIDTH = 1e-3
# Residual target for the Newton polish.
_INVERSION_TOL = 1e-10
# Give up expanding the root bracket beyond this magnitude.
_BRACKET_BOUND = 1e8


class MapEvaluationError(RuntimeError):
    """A map evaluation produced a non-finite intermediate value."""


class InversionError(RuntimeError):
    """Root finding for a component inverse failed."""


class Rectifier(enum.Enum):
    """Positive scalar function applied to the diagonal derivative."""

    EXPONENTIAL = "exponential"
    SOFTPLUS = "softplus"

    def apply(self, u):
        u = np.asarray(u, dtype=float)
        if self is Rectifier.EXPONENTIAL:
            return np.exp(u)
        return np.logaddexp(0.0, u)

    def derivative(self, u):
        u = np.asarray(u, dtype=float)
        if self is Rectifier.EXPONENTIAL:
            return np.exp(u)
        return _sigmoid(u)

    def log_value(self, u):
        u = np.asarray(u, dtype=float)
        if self is Rectifier.EXPONENTIAL:
            return u
        return np.log(np.logaddexp(0.0, u))

    def dlog(self, u):
        """Logarithmic derivative d/du log g(u) = g'(u)/g(u)."""
        u = np.asarray(u, dtype=float)
        if self is Rectifier.EXPONENTIAL:
            return np.ones_like(u)
        return _sigmoid(u) / np.logaddexp(0.0, u)


def _sigmoid(u):
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def hermite_eval(degree: int, x):
    """Probabilist's Hermite polynomial of the given degree at x.

    Satisfies He_0 = 1, He_1 = x and He_{n+1}(x) = x He_n(x) - n He_{n-1}(x).
    """
    if degree < 0:
        raise ValueError("degree must be non-negative")
    x = np.asarray(x, dtype=float)
    prev, cur = np.ones_like(x), x
    if degree == 0:
        return prev if prev.ndim else float(prev)
    for n in range(1, degree):
        prev, cur = cur, x * cur - n * prev
    return cur if cur.ndim else float(cur)


def _he_table(x, max_degree):
    """Hermite values He_0..He_max_degree along a trailing axis."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (max_degree + 1,))
    out[..., 0] = 1.0
    if max_degree >= 1:
        out[..., 1] = x
    for n in range(1, max_degree):
        out[..., n + 1] = x * out[..., n] - n * out[..., n - 1]
    return out


@lru_cache(maxsize=32)
def _gauss_legendre(n: int):
    nodes, weights = np.polynomial.legendre.leggauss(n)
    return nodes, weights


def _grlex_compositions(dim, total):
    """Compositions of `total` into `dim` parts, first part descending."""
    if dim == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _grlex_compositions(dim - 1, total - first):
            yield (first,) + rest


def build_total_order_set(dim: int, order: int) -> "MultiIndexSet":
    """All multi-indices over `dim` inputs with total degree <= `order`.

    Ordering is graded lexicographic (by total degree, then descending on
    the leading entries), which keeps coefficient vectors reproducible.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if order < 0:
        raise ValueError("order must be >= 0")
    rows = []
    for total in range(order + 1):
        rows.extend(_grlex_compositions(dim, total))
    indices = np.array(rows, dtype=np.int64)
    return MultiIndexSet(indices=indices, dim=dim, max_total_order=order)


@dataclass(frozen=True)
class MultiIndexSet:
    """Ordered collection of polynomial multi-indices for one component."""

    indices: np.ndarray
    dim: int
    max_total_order: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 2 or idx.shape[1] != self.dim:
            raise ValueError("indices must be a 2-D array with `dim` columns")
        if np.any(idx < 0):
            raise ValueError("multi-index entries must be non-negative")
        if np.any(idx.sum(axis=1) > self.max_total_order):
            raise ValueError("total degree exceeds max_total_order")
        if len({tuple(row) for row in idx}) != len(idx):
            raise ValueError("duplicate multi-indices")
        if not np.any(np.all(idx == 0, axis=1)):
            raise ValueError("the constant (all-zero) index is required")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return self.indices.shape[0]


class _ComponentStructure:
    """Coefficient-independent split of an index set for fast evaluation.

    Terms whose last-input degree is zero form the off-diagonal polynomial
    part; the remaining terms only enter through the last-input derivative
    inside the rectified integral.
    """

    def __init__(self, index_set: MultiIndexSet):
        idx = index_set.indices
        last = idx[:, -1]
        self.idx = idx
        self.off_pos = np.nonzero(last == 0)[0]
        self.diag_pos = np.nonzero(last >= 1)[0]
        self.alpha_last = last[self.diag_pos].astype(float)
        self.deg_last_max = int(last.max()) if len(last) else 0
        if self.diag_pos.size:
            # One-hot bucket matrix: term j contributes He_{alpha_j - 1}.
            buckets = last[self.diag_pos] - 1
            onehot = np.zeros((self.diag_pos.size, self.deg_last_max))
            onehot[np.arange(self.diag_pos.size), buckets] = 1.0
            self.onehot = onehot
        else:
            self.onehot = np.zeros((0, 0))

    def prefix_products(self, x: np.ndarray) -> np.ndarray:
        """Products of prefix-variable Hermite factors, one column per term."""
        rows, q = x.shape
        prod = np.ones((rows, self.idx.shape[0]))
        for col in range(q - 1):
            degs = self.idx[:, col]
            top = int(degs.max())
            if top == 0:
                continue
            table = _he_table(x[:, col], top)
            prod *= table[:, degs]
        return prod


@dataclass
class MapComponent:
    """One monotone component of a triangular map."""

    index_set: MultiIndexSet
    coefficients: np.ndarray
    rectifier: Rectifier = Rectifier.EXPONENTIAL
    quadrature_points: int = 32

    def __post_init__(self):
        coeffs = np.asarray(self.coefficients, dtype=float)
        if coeffs.shape != (len(self.index_set),):
            raise ValueError(
                f"expected {len(self.index_set)} coefficients, got {coeffs.shape}"
            )
        if self.quadrature_points < 4:
            raise ValueError("quadrature_points must be >= 4")
        self.coefficients = coeffs
        self._structure = _ComponentStructure(self.index_set)

    @property
    def input_dim(self) -> int:
        return self.index_set.dim

    def replace_coefficients(self, coefficients: np.ndarray) -> "MapComponent":
        return MapComponent(
            index_set=self.index_set,
            coefficients=np.asarray(coefficients, dtype=float).copy(),
            rectifier=self.rectifier,
            quadrature_points=self.quadrature_points,
        )


def _check_batch(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"expected input of dimension {dim}, got shape {x.shape}")
    return x, single


def _overflow_error(component: MapComponent) -> MapEvaluationError:
    peak = float(np.max(np.abs(component.coefficients))) if len(component.coefficients) else 0.0
    return MapEvaluationError(
        f"rectifier overflow during component evaluation; "
        f"max |coefficient| = {peak:.6g}"
    )


def _component_eval_batch(component: MapComponent, x: np.ndarray, check: bool = True):
    """Component values for a batch of points, rows independent."""
    s = component._structure
    a = component.coefficients
    prefix = s.prefix_products(x)
    values = prefix[:, s.off_pos] @ a[s.off_pos] if s.off_pos.size else np.zeros(len(x))
    xq = x[:, -1]
    if s.diag_pos.size == 0:
        g0 = float(component.rectifier.apply(0.0))
        return values + g0 * xq
    nodes, weights = _gauss_legendre(component.quadrature_points)
    t = 0.5 * xq[:, None] * (nodes + 1.0)
    table = _he_table(t, s.deg_last_max - 1)
    # Bucketed diagonal derivative at the quadrature nodes.
    contrib = (prefix[:, s.diag_pos] * (a[s.diag_pos] * s.alpha_last)) @ s.onehot
    deriv = np.einsum("rd,rqd->rq", contrib, table)
    with np.errstate(over="ignore"):
        gvals = component.rectifier.apply(deriv)
    integral = 0.5 * xq * (gvals @ weights)
    values = values + integral
    if check and not np.all(np.isfinite(values)):
        raise _overflow_error(component)
    return values


def _component_diag_derivative(component: MapComponent, x: np.ndarray):
    """Last-input derivative of the polynomial part, evaluated at x itself."""
    s = component._structure
    if s.diag_pos.size == 0:
        return np.zeros(len(x))
    a = component.coefficients
    prefix = s.prefix_products(x)
    contrib = (prefix[:, s.diag_pos] * (a[s.diag_pos] * s.alpha_last)) @ s.onehot
    table = _he_table(x[:, -1], s.deg_last_max - 1)
    return np.einsum("rd,rd->r", contrib, table)


def evaluate_f(component: MapComponent, x):
    """Full tensor-product Hermite expansion, all terms included."""
    x, single = _check_batch(x, component.input_dim)
    s = component._structure
    prod = s.prefix_products(x)
    last = s.idx[:, -1]
    top = int(last.max()) if len(last) else 0
    if top > 0:
        table = _he_table(x[:, -1], top)
        prod = prod * table[:, last]
    out = prod @ component.coefficients
    return float(out[0]) if single else out


def evaluate_component(component: MapComponent, x):
    """Monotone component value: off-diagonal part plus rectified integral."""
    x, single = _check_batch(x, component.input_dim)
    out = _component_eval_batch(component, x)
    return float(out[0]) if single else out


@dataclass
class TriangularTransportMap:
    """Ordered monotone components over a shared input vector.

    The leading ``fixed_prefix_dim`` inputs are conditioning variables only:
    every component sees them, none of them is ever solved for during
    inversion.
    """

    components: list[MapComponent]
    total_dim: int
    fixed_prefix_dim: int = 0

    def __post_init__(self):
        if self.fixed_prefix_dim < 0:
            raise ValueError("fixed_prefix_dim must be >= 0")
        expected = self.total_dim - self.fixed_prefix_dim
        if len(self.components) != expected:
            raise ValueError(
                f"expected {expected} components, got {len(self.components)}"
            )
        for k, comp in enumerate(self.components, start=1):
            if comp.input_dim != self.fixed_prefix_dim + k:
                raise ValueError(
                    f"component {k} must take {self.fixed_prefix_dim + k} inputs, "
                    f"takes {comp.input_dim}"
                )

    @property
    def output_dim(self) -> int:
        return self.total_dim - self.fixed_prefix_dim

    def coefficient_vector(self) -> np.ndarray:
        """All component coefficients concatenated in component order."""
        if not self.components:
            return np.zeros(0)
        return np.concatenate([c.coefficients for c in self.components])

    def with_coefficient_vector(self, values: np.ndarray) -> "TriangularTransportMap":
        values = np.asarray(values, dtype=float)
        sizes = [len(c.coefficients) for c in self.components]
        if values.shape != (sum(sizes),):
            raise ValueError("coefficient vector length mismatch")
        parts = np.split(values, np.cumsum(sizes)[:-1])
        comps = [c.replace_coefficients(p) for c, p in zip(self.components, parts)]
        return TriangularTransportMap(comps, self.total_dim, self.fixed_prefix_dim)


def build_total_order_map(
    total_dim: int,
    fixed_prefix_dim: int = 0,
    order: int = 2,
    rectifier: Rectifier = Rectifier.EXPONENTIAL,
    quadrature_points: int = 32,
) -> TriangularTransportMap:
    """Zero-coefficient triangular map with full total-order index sets."""
    components = []
    for k in range(1, total_dim - fixed_prefix_dim + 1):
        index_set = build_total_order_set(fixed_prefix_dim + k, order)
        components.append(
            MapComponent(
                index_set=index_set,
                coefficients=np.zeros(len(index_set)),
                rectifier=rectifier,
                quadrature_points=quadrature_points,
            )
        )
    return TriangularTransportMap(components, total_dim, fixed_prefix_dim)


def evaluate_map(transport_map: TriangularTransportMap, x):
    """Stack of component values; entry k uses the first prefix+k inputs."""
    x, single = _check_batch(x, transport_map.total_dim)
    m = transport_map.fixed_prefix_dim
    out = np.empty((len(x), transport_map.output_dim))
    for k, comp in enumerate(transport_map.components, start=1):
        out[:, k - 1] = _component_eval_batch(comp, x[:, : m + k])
    return out[0] if single else out


def log_det_jacobian(transport_map: TriangularTransportMap, x):
    """Log absolute Jacobian determinant of the state block.

    The triangular structure makes this the sum of the log-rectified
    diagonal derivatives, which is finite for every finite input.
    """
    x, single = _check_batch(x, transport_map.total_dim)
    m = transport_map.fixed_prefix_dim
    total = np.zeros(len(x))
    for k, comp in enumerate(transport_map.components, start=1):
        deriv = _component_diag_derivative(comp, x[:, : m + k])
        total += comp.rectifier.log_value(deriv)
    if not np.all(np.isfinite(total)):
        raise _overflow_error(transport_map.components[0])
    return float(total[0]) if single else total


class _DiagonalSlice:
    """A component restricted to its last input, prefix block frozen.

    Used by the root-finding code: the prefix-dependent quantities are
    computed once, then values and slopes along the last input are cheap.
    """

    def __init__(self, component: MapComponent, prefix: np.ndarray):
        s = component._structure
        a = component.coefficients
        rows = len(prefix)
        x_dummy = np.concatenate([prefix, np.zeros((rows, 1))], axis=1)
        products = s.prefix_products(x_dummy)
        self.offset = (
            products[:, s.off_pos] @ a[s.off_pos] if s.off_pos.size else np.zeros(rows)
        )
        if s.diag_pos.size:
            self.contrib = (products[:, s.diag_pos] * (a[s.diag_pos] * s.alpha_last)) @ s.onehot
        else:
            self.contrib = None
        self.deg = s.deg_last_max
        self.rectifier = component.rectifier
        self.nodes, self.weights = _gauss_legendre(component.quadrature_points)
        self.component = component

    def value(self, t: np.ndarray, rows=None, check: bool = True) -> np.ndarray:
        offset = self.offset if rows is None else self.offset[rows]
        if self.contrib is None:
            return offset + float(self.rectifier.apply(0.0)) * t
        contrib = self.contrib if rows is None else self.contrib[rows]
        grid = 0.5 * t[:, None] * (self.nodes + 1.0)
        table = _he_table(grid, self.deg - 1)
        deriv = np.einsum("rd,rqd->rq", contrib, table)
        with np.errstate(over="ignore", invalid="ignore"):
            gvals = self.rectifier.apply(deriv)
            out = offset + 0.5 * t * (gvals @ self.weights)
        if check and not np.all(np.isfinite(out)):
            raise _overflow_error(self.component)
        return out

    def slope(self, t: np.ndarray, rows=None) -> np.ndarray:
        if self.contrib is None:
            return np.full(len(t), float(self.rectifier.apply(0.0)))
        contrib = self.contrib if rows is None else self.contrib[rows]
        table = _he_table(t, self.deg - 1)
        deriv = np.einsum("rd,rd->r", contrib, table)
        with np.errstate(over="ignore"):
            return self.rectifier.apply(deriv)


def _expand_brackets(slice_, z):
    """Geometric bracket expansion around the initial guess t = z."""
    lo = z.copy()
    hi = z.copy()
    res = slice_.value(z) - z
    need_lo = res > 0
    need_hi = res < 0
    step = 1.0
    while np.any(need_lo) or np.any(need_hi):
        if np.any(need_lo):
            rows = np.nonzero(need_lo)[0]
            lo[rows] -= step
            still = slice_.value(lo[rows], rows) - z[rows] > 0
            need_lo[rows] = still
        if np.any(need_hi):
            rows = np.nonzero(need_hi)[0]
            hi[rows] += step
            still = slice_.value(hi[rows], rows) - z[rows] < 0
            need_hi[rows] = still
        step *= 2.0
        if step > 4.0 * _BRACKET_BOUND or np.any(np.abs(lo) > _BRACKET_BOUND) or np.any(
            np.abs(hi) > _BRACKET_BOUND
        ):
            raise InversionError("inversion bracket failure")
    return lo, hi


def _solve_diagonal(slice_, z):
    """Solve value(t) = z per row: bisection to a narrow bracket, then Newton."""
    lo, hi = _expand_brackets(slice_, z)
    while np.max(hi - lo) > _BISECTION_WIDTH:
        mid = 0.5 * (lo + hi)
        res = slice_.value(mid) - z
        lo = np.where(res <= 0, mid, lo)
        hi = np.where(res > 0, mid, hi)
    t = 0.5 * (lo + hi)
    for _ in range(100):
        res = slice_.value(t) - z
        if np.max(np.abs(res)) <= _INVERSION_TOL:
            return t
        lo = np.where(res < 0, t, lo)
        hi = np.where(res > 0, t, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_new = t - res / slice_.slope(t)
        bad = ~np.isfinite(t_new) | (t_new < lo) | (t_new > hi)
        t = np.where(bad, 0.5 * (lo + hi), t_new)
    res = slice_.value(t) - z
    if np.max(np.abs(res)) <= _INVERSION_TOL:
        return t
    raise InversionError(
        f"inversion did not reach tolerance; residual {np.max(np.abs(res)):.3g}"
    )


def invert_last(component: MapComponent, x_prefix, z: float) -> float:
    """Solve for the last input given the prefix and a target value."""
    x_prefix = np.asarray(x_prefix, dtype=float).reshape(1, -1)
    if x_prefix.shape[1] != component.input_dim - 1:
        raise ValueError(
            f"prefix must have {component.input_dim - 1} entries, "
            f"got {x_prefix.shape[1]}"
        )
    slice_ = _DiagonalSlice(component, x_prefix)
    return float(_solve_diagonal(slice_, np.array([float(z)]))[0])


def condition_inverse(transport_map: TriangularTransportMap, y_fixed, z):
    """Invert the state block with the conditioning prefix held fixed.

    Solves the components in order: the first root only involves the prefix,
    each later root additionally sees the previously solved entries.
    Accepts a single target vector or a batch of rows sharing one prefix.
    """
    y_fixed = np.asarray(y_fixed, dtype=float).reshape(-1)
    if y_fixed.shape[0] != transport_map.fixed_prefix_dim:
        raise ValueError(
            f"prefix must have {transport_map.fixed_prefix_dim} entries"
        )
    z, single = _check_batch(z, transport_map.output_dim)
    rows = len(z)
    solved = np.empty((rows, transport_map.output_dim))
    prefix = np.tile(y_fixed, (rows, 1))
    for k, comp in enumerate(transport_map.components):
        block = np.concatenate([prefix, solved[:, :k]], axis=1)
        slice_ = _DiagonalSlice(comp, block)
        solved[:, k] = _solve_diagonal(slice_, z[:, k])
    return solved[0] if single else solved


def _format_number(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    raise TypeError(f"unsupported scalar {type(value)}")


def map_to_document(transport_map: TriangularTransportMap) -> str:
    """Serialize a map to JSON with full-precision decimal coefficients."""
    parts = [
        "{",
        f'"total_dim": {transport_map.total_dim}, ',
        f'"fixed_prefix_dim": {transport_map.fixed_prefix_dim}, ',
        '"components": [',
    ]
    comp_texts = []
    for comp in transport_map.components:
        coeffs = ", ".join(_format_number(c) for c in comp.coefficients)
        comp_texts.append(
            "{"
            + f'"order": {comp.index_set.max_total_order}, '
            + f'"rectifier": "{comp.rectifier.value}", '
            + f'"quadrature_points": {comp.quadrature_points}, '
            + f'"coefficients": [{coeffs}]'
            + "}"
        )
    parts.append(", ".join(comp_texts))
    parts.append("]}")
    return "".join(parts)


def map_from_document(text: str) -> TriangularTransportMap:
    doc = json.loads(text)
    total_dim = int(doc["total_dim"])
    prefix = int(doc["fixed_prefix_dim"])
    components = []
    for k, entry in enumerate(doc["components"], start=1):
        index_set = build_total_order_set(prefix + k, int(entry["order"]))
        components.append(
            MapComponent(
                index_set=index_set,
                coefficients=np.asarray(entry["coefficients"], dtype=float),
                rectifier=Rectifier(entry["rectifier"]),
                quadrature_points=int(entry["quadrature_points"]),
            )
        )
    return TriangularTransportMap(components, total_dim, prefix)


def save_map(transport_map: TriangularTransportMap, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(map_to_document(transport_map))


def load_map(path) -> TriangularTransportMap:
    with open(path, "r", encoding="utf-8") as fh:
        return map_from_document(fh.read())
