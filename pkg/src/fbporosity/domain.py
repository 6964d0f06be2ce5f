"""Cylinder geometry, the bottom-flattening change of variables, coefficient
fields and checks of the structural hypotheses on ``a`` and ``h``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grid import Grid, GridField

ValidationSeed = 20240517
N_RANDOM_DIRECTIONS = 32


class DomainError(ValueError):
    """A point or field lies outside the admissible domain."""


class ParameterError(ValueError):
    """Invalid numerical parameter."""


_EXPR_NAMESPACE = {
    name: getattr(np, name)
    for name in (
        "sin", "cos", "tan", "exp", "log", "sqrt", "abs", "arctan", "arctan2",
        "sinh", "cosh", "tanh", "maximum", "minimum", "where", "clip", "sign",
    )
}
_EXPR_NAMESPACE.update(pi=math.pi, e=math.e, pos=lambda v: np.maximum(v, 0.0))


def make_function(expr: str | float | Callable, n: int) -> Callable[..., np.ndarray]:
    """Turn an expression string over ``x1..xn`` into a vectorised callable.

    Numbers and callables pass through (numbers become constants).
    """
    if callable(expr):
        return expr
    if isinstance(expr, (int, float)):
        value = float(expr)
        return lambda *xs: np.full(np.shape(xs[0]) if xs else (), value)
    code = compile(str(expr), "<expression>", "eval")
    names = set(code.co_names)
    allowed = set(_EXPR_NAMESPACE) | {f"x{i + 1}" for i in range(n)}
    unknown = names - allowed
    if unknown:
        raise ParameterError(f"unknown names in expression {expr!r}: {sorted(unknown)}")

    def fn(*xs):
        env = dict(_EXPR_NAMESPACE)
        env.update({f"x{i + 1}": np.asarray(x, dtype=float) for i, x in enumerate(xs)})
        out = eval(code, {"__builtins__": {}}, env)
        shape = np.broadcast_shapes(*[np.shape(x) for x in xs]) if xs else ()
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()

    fn.expression = str(expr)
    return fn


def _zero_gamma(*xs):
    return np.zeros(np.broadcast_shapes(*[np.shape(x) for x in xs]) if xs else ())


@dataclass(frozen=True)
class DomainSpec:
    """Cylinder ``B'_rho x (0, l)`` above the bottom profile ``gamma``.

    ``n == 1`` is accepted as a single-column harness (``x'`` is empty).
    ``center`` shifts the cross-section ball; the 3D cross-section is a
    square grid with an inscribed-disc mask.
    """

    rho: float
    l: float
    n: int
    grid_shape: tuple[int, ...]
    gamma: Callable[..., np.ndarray] = _zero_gamma
    center: tuple[float, ...] = ()
    gamma_c11_bound: float = 1.0e4

    def __post_init__(self):
        if self.rho <= 0 or self.l <= 0:
            raise ParameterError("rho and l must be positive")
        if self.n < 1:
            raise ParameterError("dimension must be at least 1")
        if len(self.grid_shape) != self.n:
            raise ParameterError(f"grid_shape needs {self.n} entries")
        object.__setattr__(self, "grid_shape", tuple(int(m) for m in self.grid_shape))
        center = tuple(float(c) for c in self.center) or (0.0,) * (self.n - 1)
        if len(center) != self.n - 1:
            raise ParameterError("center must have n-1 entries")
        object.__setattr__(self, "center", center)
        if self.n > 1:
            curv = self.gamma_second_difference()
            if not np.isfinite(curv) or curv > self.gamma_c11_bound:
                raise DomainError(
                    f"gamma fails the C^(1,1) proxy: max second difference {curv:.3g} "
                    f"> bound {self.gamma_c11_bound:.3g}"
                )

    def grid(self) -> Grid:
        """Grid on the flat cylinder ``U``."""
        lower = [c - self.rho for c in self.center] + [0.0]
        upper = [c + self.rho for c in self.center] + [self.l]
        return Grid.from_bounds(lower, upper, self.grid_shape)

    @property
    def h_grid(self) -> float:
        return self.grid().h

    def cross_section_grid(self) -> list[np.ndarray]:
        return self.grid().mesh()[:-1] if self.n > 1 else []

    def gamma_values(self, xprime: Sequence[np.ndarray]) -> np.ndarray:
        if self.n == 1:
            return np.zeros(())
        return np.asarray(self.gamma(*xprime), dtype=float)

    def gamma_gradient(self, xprime: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Central-difference gradient of gamma, step = grid spacing."""
        spacing = self.grid().spacing
        grads = []
        for k in range(self.n - 1):
            d = spacing[k]
            plus = [x + d if j == k else x for j, x in enumerate(xprime)]
            minus = [x - d if j == k else x for j, x in enumerate(xprime)]
            grads.append((self.gamma_values(plus) - self.gamma_values(minus)) / (2 * d))
        return grads

    def gamma_second_difference(self) -> float:
        g = self.grid()
        if self.n == 1:
            return 0.0
        xs = np.meshgrid(*g.axes()[:-1], indexing="ij")
        vals = self.gamma_values(xs)
        worst = 0.0
        for k in range(self.n - 1):
            if vals.shape[k] < 3:
                continue
            second = np.diff(vals, n=2, axis=k) / g.spacing[k] ** 2
            worst = max(worst, float(np.max(np.abs(second))))
        return worst

    def lateral_mask(self, grid: Grid | None = None) -> np.ndarray:
        """Nodes on or outside the lateral wall ``|x' - c| >= rho``."""
        grid = grid or self.grid()
        if self.n == 1:
            return np.zeros(grid.shape, dtype=bool)
        mesh = grid.mesh()
        if self.n == 2:
            r = np.abs(mesh[0] - self.center[0])
        else:
            r = np.sqrt(sum((mesh[k] - self.center[k]) ** 2 for k in range(self.n - 1)))
        return r >= self.rho * (1 - 1e-12)

    def contains(self, x: Sequence[float]) -> bool:
        x = np.asarray(x, dtype=float)
        xp = x[:-1]
        if self.n > 1 and np.linalg.norm(xp - np.asarray(self.center)) >= self.rho:
            return False
        g = float(self.gamma_values([np.asarray(v) for v in xp]))
        return g < x[-1] < g + self.l


def flatten_point(spec: DomainSpec, x: Sequence[float]) -> np.ndarray:
    """``Phi(x) = (x', x_n - gamma(x'))``; raises DomainError outside Omega."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.n,):
        raise DomainError(f"expected a point of dimension {spec.n}")
    if not spec.contains(x):
        raise DomainError(f"point {x.tolist()} is not in Omega")
    y = x.copy()
    y[-1] = x[-1] - float(spec.gamma_values([np.asarray(v) for v in x[:-1]]))
    return y


def unflatten_point(spec: DomainSpec, y: Sequence[float]) -> np.ndarray:
    """Inverse map ``Psi(y) = (y', y_n + gamma(y'))`` (closure of U allowed)."""
    y = np.asarray(y, dtype=float)
    if y.shape != (spec.n,):
        raise DomainError(f"expected a point of dimension {spec.n}")
    if not (-1e-12 <= y[-1] <= spec.l + 1e-12):
        raise DomainError(f"point {y.tolist()} is not in the flat cylinder")
    x = y.copy()
    x[-1] = y[-1] + float(spec.gamma_values([np.asarray(v) for v in y[:-1]]))
    return x


def flatten_jacobian(spec: DomainSpec, xprime: Sequence[np.ndarray]) -> np.ndarray:
    """``D Phi`` at the given cross-section points, shape (..., n, n)."""
    n = spec.n
    shape = np.shape(xprime[0]) if xprime else ()
    jac = np.broadcast_to(np.eye(n), shape + (n, n)).copy()
    for k, gk in enumerate(spec.gamma_gradient(xprime)):
        jac[..., n - 1, k] = -gk
    return jac


@dataclass(frozen=True)
class CoefficientField:
    """Matrix field ``a`` and scalar field ``h`` on a grid plus declared bounds."""

    grid: Grid
    a: np.ndarray
    h: np.ndarray
    lam: float
    Lam: float
    h_lower: float
    h_upper: float
    p: float
    alpha: float
    sources: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = self.grid.ndim
        a = np.array(self.a, dtype=float)
        h = np.array(self.h, dtype=float)
        if a.shape != self.grid.shape + (n, n):
            raise ParameterError(f"a has shape {a.shape}, expected {self.grid.shape + (n, n)}")
        if h.shape != self.grid.shape:
            raise ParameterError(f"h has shape {h.shape}, expected {self.grid.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(h))):
            raise ParameterError("coefficient fields must be finite")
        if self.p <= n:
            raise ParameterError(f"integrability exponent p={self.p} must exceed n={n}")
        if not 0 < self.alpha < 1:
            raise ParameterError("Hoelder exponent must lie in (0, 1)")
        a.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "h", h)

    @classmethod
    def from_functions(cls, grid: Grid, a_fn, h_fn, **bounds) -> "CoefficientField":
        """Sample ``a_fn(*coords) -> (..., n, n)`` and ``h_fn(*coords)`` on the grid."""
        mesh = grid.mesh()
        a = np.asarray(a_fn(*mesh), dtype=float)
        if a.shape == (grid.ndim, grid.ndim):
            a = np.broadcast_to(a, grid.shape + a.shape)
        h = np.broadcast_to(np.asarray(h_fn(*mesh), dtype=float), grid.shape)
        return cls(grid, a, h, **bounds)

    @property
    def n(self) -> int:
        return self.grid.ndim

    @property
    def has_cross_terms(self) -> bool:
        off = self.a.copy()
        idx = np.arange(self.n)
        off[..., idx, idx] = 0.0
        return bool(np.any(off != 0.0))

    def with_grid_values(self, a: np.ndarray, h: np.ndarray) -> "CoefficientField":
        return CoefficientField(
            self.grid, a, h, self.lam, self.Lam, self.h_lower, self.h_upper, self.p, self.alpha
        )


def matrix_function(entries: Sequence[Sequence], n: int):
    """Build ``a(*coords) -> (..., n, n)`` from an n x n table of expressions."""
    fns = [[make_function(entries[i][j], n) for j in range(n)] for i in range(n)]

    def a_fn(*xs):
        return np.stack([np.stack([fns[i][j](*xs) for j in range(n)], -1) for i in range(n)], -2)

    return a_fn


def transform_coefficients(spec: DomainSpec, a_fn, h_fn, **bounds) -> CoefficientField:
    """Coefficients of the flattened problem on ``U``.

    ``b(y) = DPhi a(Psi(y)) DPhi^T`` and ``k(y) = h(Psi(y))``; ``a_fn`` and
    ``h_fn`` take physical coordinates.
    """
    grid = spec.grid()
    mesh = grid.mesh()
    xprime = mesh[:-1]
    gam = spec.gamma_values(xprime) if spec.n > 1 else 0.0
    grads = spec.gamma_gradient(xprime)
    if any(not np.all(np.isfinite(g)) for g in grads):
        raise DomainError("gamma gradient is not finite")
    phys = list(xprime) + [mesh[-1] + gam]
    a = np.asarray(a_fn(*phys), dtype=float)
    if a.shape == (spec.n, spec.n):
        a = np.broadcast_to(a, grid.shape + a.shape)
    jac = flatten_jacobian(spec, xprime)
    b = np.einsum("...ij,...jk,...lk->...il", jac, a, jac)
    k = np.broadcast_to(np.asarray(h_fn(*phys), dtype=float), grid.shape)
    return CoefficientField(grid, b, k, **bounds)


@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    detail: str
    witness: tuple | None = None

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "detail": self.detail,
            "witness": None if self.witness is None else [float(v) for v in self.witness],
        }


@dataclass
class ValidationReport:
    checks: list[AssumptionCheck]
    estimates: dict[str, float]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self) -> list[AssumptionCheck]:
        return [c for c in self.checks if not c.passed]

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [c.as_dict() for c in self.checks],
            "estimates": {k: float(v) for k, v in self.estimates.items()},
        }


def unit_directions(n: int, count: int = N_RANDOM_DIRECTIONS, seed: int = ValidationSeed) -> np.ndarray:
    """The 2n signed axis vectors plus ``count`` seeded random unit vectors."""
    eye = np.eye(n)
    rng = np.random.default_rng(seed)
    rand = rng.normal(size=(count, n))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    return np.vstack([eye, -eye, rand])


def _witness(grid: Grid, flat_index: int) -> tuple:
    idx = np.unravel_index(flat_index, grid.shape)
    return tuple(grid.node(idx))


def validate_assumptions(cf: CoefficientField, tol_mono: float = 1e-12) -> ValidationReport:
    """Check the bounds on ``a`` and ``h`` node by node; never raises."""
    grid, n = cf.grid, cf.n
    a, h = cf.a, cf.h
    checks: list[AssumptionCheck] = []
    est: dict[str, float] = {}

    entry_sum = np.abs(a).sum(axis=(-2, -1))
    Lam_est = float(entry_sum.max())
    est["Lambda"] = Lam_est
    worst = int(np.argmax(entry_sum))
    ok = Lam_est <= cf.Lam * (1 + 1e-12)
    checks.append(AssumptionCheck(
        "bounded_entries", ok, f"max sum|a_ij| = {Lam_est:.6g} vs Lambda = {cf.Lam:.6g}",
        None if ok else _witness(grid, worst),
    ))

    dirs = unit_directions(n)
    quad = np.einsum("...ij,di,dj->...d", a, dirs, dirs)
    sampled = quad.min(axis=-1)
    lam_sampled = float(sampled.min())
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    lam_exact = float(np.linalg.eigvalsh(sym)[..., 0].min()) if n <= 3 else lam_sampled
    est["lambda"] = lam_exact
    est["lambda_sampled"] = lam_sampled
    worst = int(np.argmin(sampled))
    ok = lam_sampled >= cf.lam * (1 - 1e-12) and lam_exact >= cf.lam * (1 - 1e-12)
    checks.append(AssumptionCheck(
        "ellipticity", ok, f"min a xi.xi = {lam_sampled:.6g} (exact {lam_exact:.6g}) vs lambda = {cf.lam:.6g}",
        None if ok else _witness(grid, worst),
    ))

    hmin, hmax = float(h.min()), float(h.max())
    est["h_lower"], est["h_upper"] = hmin, hmax
    ok = hmin >= cf.h_lower * (1 - 1e-12) and hmax <= cf.h_upper * (1 + 1e-12)
    bad = int(np.argmin(h)) if hmin < cf.h_lower * (1 - 1e-12) else int(np.argmax(h))
    checks.append(AssumptionCheck(
        "h_bounds", ok, f"h in [{hmin:.6g}, {hmax:.6g}] vs [{cf.h_lower:.6g}, {cf.h_upper:.6g}]",
        None if ok else _witness(grid, bad),
    ))

    dh = np.gradient(h, grid.spacing[-1], axis=-1)
    cell = float(np.prod(grid.spacing))
    lp = float((np.abs(dh) ** cf.p).sum() * cell) ** (1.0 / cf.p)
    est["h_xn_Lp"] = lp
    checks.append(AssumptionCheck(
        "h_xn_integrable", bool(np.isfinite(lp)), f"|h_xn|_p = {lp:.6g} with p = {cf.p:g}",
    ))

    interior = tuple(slice(1, -1) for _ in range(n))
    dh_in = dh[interior]
    if dh_in.size:
        mn = float(dh_in.min())
        pos = np.unravel_index(int(np.argmin(dh_in)), dh_in.shape)
        wit = tuple(grid.node([i + 1 for i in pos]))
    else:
        mn, wit = 0.0, None
    est["min_h_xn"] = mn
    ok = mn >= -tol_mono
    checks.append(AssumptionCheck(
        "h_monotone", ok, f"min discrete h_xn = {mn:.6g} (tolerance {tol_mono:g})",
        None if ok else wit,
    ))

    quotient = 0.0
    for k in range(n):
        d = np.abs(np.diff(a, axis=k)).max(axis=(-2, -1)) if a.shape[k] > 1 else np.zeros(1)
        quotient = max(quotient, float(d.max()) / grid.spacing[k] ** cf.alpha)
    est["holder_quotient"] = quotient
    checks.append(AssumptionCheck(
        "a_holder", bool(np.isfinite(quotient)), f"empirical C^0,{cf.alpha:g} quotient = {quotient:.6g}",
    ))
    return ValidationReport(checks, est)
